//! Simulated GPU virtual-memory device.
//!
//! Mirrors the driver-level primitives a VMM-capable GPU exposes: reserving a
//! virtual address range, creating a physical chunk, and mapping a chunk into
//! one page slot of a range, plus the three inverses. Only indexing state is
//! tracked; there is no backing storage.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const KIB: u64 = 1024;
pub const MIB: u64 = 1024 * KIB;
pub const GIB: u64 = 1024 * MIB;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviceConfig {
    pub capacity_bytes: u64,
    /// Physical allocation granularity. Also the page size: one page maps one chunk.
    pub chunk_size_bytes: u64,
    /// Constant non-KV usage (model weights).
    pub weights_bytes: u64,
    pub activation_bytes_per_request: u64,
}

impl Default for DeviceConfig {
    fn default() -> Self {
        Self {
            capacity_bytes: 80 * GIB,
            chunk_size_bytes: 2 * MIB,
            weights_bytes: 12 * GIB,
            activation_bytes_per_request: 0,
        }
    }
}

impl DeviceConfig {
    pub fn page_size_bytes(&self) -> u64 {
        self.chunk_size_bytes
    }

    pub fn validate(&self) -> Result<(), DeviceError> {
        if self.chunk_size_bytes == 0 || self.capacity_bytes % self.chunk_size_bytes != 0 {
            return Err(DeviceError::InvalidConfig(format!(
                "chunk size {} must be non-zero and divide capacity {}",
                self.chunk_size_bytes, self.capacity_bytes
            )));
        }
        if self.weights_bytes > self.capacity_bytes {
            return Err(DeviceError::InvalidConfig(format!(
                "weights {} exceed capacity {}",
                self.weights_bytes, self.capacity_bytes
            )));
        }
        Ok(())
    }

    /// Chunks that fit once weights are resident, ignoring activations.
    pub fn max_chunks(&self) -> u64 {
        (self.capacity_bytes - self.weights_bytes) / self.chunk_size_bytes
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DeviceError {
    #[error("invalid device configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid reservation size {0} (must be a non-zero multiple of the page size)")]
    InvalidSize(u64),
    #[error("device out of memory: requested {requested} bytes, {free} free")]
    DeviceOutOfMemory { requested: u64, free: u64 },
    #[error("page {page} of range {base:#x} is already mapped")]
    PageAlreadyMapped { base: u64, page: usize },
    #[error("page {page} of range {base:#x} is not mapped")]
    PageNotMapped { base: u64, page: usize },
    #[error("page index {page} out of range for {page_count}-page range")]
    IndexOutOfRange { page: usize, page_count: usize },
    #[error("stale or unknown physical handle {0}")]
    StaleHandle(PhysicalHandle),
    #[error("chunk {handle} still mapped {map_count} time(s)")]
    ChunkStillMapped { handle: PhysicalHandle, map_count: usize },
    #[error("range {base:#x} still has {mapped} mapped page(s)")]
    RangeStillMapped { base: u64, mapped: usize },
    #[error("unknown virtual range {0:#x}")]
    UnknownRange(u64),
}

/// Contiguous virtual address range issued by [`Device::reserve_address`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct VirtualRange {
    /// Start address. Addresses come from a monotonically increasing counter and are never reused.
    pub base: u64,
    pub length_bytes: u64,
    pub page_count: usize,
}

impl VirtualRange {
    pub fn end(&self) -> u64 {
        self.base + self.length_bytes
    }

    pub fn overlaps(&self, other: &VirtualRange) -> bool {
        self.base < other.end() && other.base < self.end()
    }
}

/// Identity of one physical chunk. Ids are unique over the device lifetime.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PhysicalHandle(pub u64);

impl std::fmt::Display for PhysicalHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "PC{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DeviceStats {
    pub created_bytes: u64,
    pub reserved_virtual_bytes: u64,
    pub mapped_page_count: usize,
    pub free_bytes: u64,
    pub activation_bytes: u64,
    pub live_chunks: usize,
    pub live_ranges: usize,
}

/// One primitive driver call, recorded in issue order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DeviceCall {
    Reserve { base: u64, pages: usize },
    Create { handle: PhysicalHandle },
    Map { base: u64, page: usize, handle: PhysicalHandle },
    Unmap { base: u64, page: usize, handle: PhysicalHandle },
    Release { base: u64 },
    Destroy { handle: PhysicalHandle },
}

impl DeviceCall {
    pub fn is_create(&self) -> bool {
        matches!(self, DeviceCall::Create { .. })
    }

    pub fn is_destroy(&self) -> bool {
        matches!(self, DeviceCall::Destroy { .. })
    }

    pub fn is_reserve(&self) -> bool {
        matches!(self, DeviceCall::Reserve { .. })
    }
}

#[derive(Debug, Clone)]
struct RangeState {
    range: VirtualRange,
    slots: Vec<Option<PhysicalHandle>>,
    mapped: usize,
}

#[derive(Debug, Clone)]
pub struct Device {
    config: DeviceConfig,
    next_base: u64,
    next_handle: u64,
    ranges: BTreeMap<u64, RangeState>,
    chunks: BTreeMap<PhysicalHandle, usize>,
    active_requests: u64,
    reserved_virtual_bytes: u64,
    mapped_pages: usize,
    log: Vec<DeviceCall>,
    logging: bool,
}

impl Device {
    pub fn new(config: DeviceConfig) -> Result<Self, DeviceError> {
        config.validate()?;
        Ok(Self {
            config,
            // Start above zero so a null address never appears.
            next_base: config.page_size_bytes(),
            next_handle: 0,
            ranges: BTreeMap::new(),
            chunks: BTreeMap::new(),
            active_requests: 0,
            reserved_virtual_bytes: 0,
            mapped_pages: 0,
            log: Vec::new(),
            logging: true,
        })
    }

    pub fn config(&self) -> &DeviceConfig {
        &self.config
    }

    /// Enable or disable the call log. Call counts are still reported through
    /// [`Device::call_count`] when disabled.
    pub fn set_logging(&mut self, on: bool) {
        self.logging = on;
    }

    pub fn call_log(&self) -> &[DeviceCall] {
        &self.log
    }

    pub fn clear_log(&mut self) {
        self.log.clear();
    }

    fn record(&mut self, call: DeviceCall) {
        if self.logging {
            self.log.push(call);
        }
    }

    pub fn created_bytes(&self) -> u64 {
        self.chunks.len() as u64 * self.config.chunk_size_bytes
    }

    pub fn activation_bytes(&self) -> u64 {
        self.active_requests * self.config.activation_bytes_per_request
    }

    pub fn free_bytes(&self) -> u64 {
        self.config.capacity_bytes
            - self.config.weights_bytes
            - self.activation_bytes()
            - self.created_bytes()
    }

    pub fn stats(&self) -> DeviceStats {
        DeviceStats {
            created_bytes: self.created_bytes(),
            reserved_virtual_bytes: self.reserved_virtual_bytes,
            mapped_page_count: self.mapped_pages,
            free_bytes: self.free_bytes(),
            activation_bytes: self.activation_bytes(),
            live_chunks: self.chunks.len(),
            live_ranges: self.ranges.len(),
        }
    }

    /// Sets the number of requests whose activations are resident.
    pub fn set_active_requests(&mut self, n: u64) -> Result<(), DeviceError> {
        let want = n * self.config.activation_bytes_per_request;
        let budget = self.config.capacity_bytes - self.config.weights_bytes - self.created_bytes();
        if want > budget {
            return Err(DeviceError::DeviceOutOfMemory {
                requested: want.saturating_sub(self.activation_bytes()),
                free: self.free_bytes(),
            });
        }
        self.active_requests = n;
        Ok(())
    }

    pub fn reserve_address(&mut self, size: u64) -> Result<VirtualRange, DeviceError> {
        let page = self.config.page_size_bytes();
        if size == 0 || size % page != 0 {
            return Err(DeviceError::InvalidSize(size));
        }
        let page_count = (size / page) as usize;
        let range = VirtualRange { base: self.next_base, length_bytes: size, page_count };
        // One guard page between ranges.
        self.next_base += size + page;
        self.ranges.insert(
            range.base,
            RangeState { range, slots: vec![None; page_count], mapped: 0 },
        );
        self.reserved_virtual_bytes += size;
        self.record(DeviceCall::Reserve { base: range.base, pages: page_count });
        Ok(range)
    }

    pub fn create_chunk(&mut self) -> Result<PhysicalHandle, DeviceError> {
        let free = self.free_bytes();
        if free < self.config.chunk_size_bytes {
            return Err(DeviceError::DeviceOutOfMemory {
                requested: self.config.chunk_size_bytes,
                free,
            });
        }
        let handle = PhysicalHandle(self.next_handle);
        self.next_handle += 1;
        self.chunks.insert(handle, 0);
        self.record(DeviceCall::Create { handle });
        Ok(handle)
    }

    fn range_mut(&mut self, range: &VirtualRange) -> Result<&mut RangeState, DeviceError> {
        match self.ranges.get_mut(&range.base) {
            Some(state) if state.range == *range => Ok(state),
            _ => Err(DeviceError::UnknownRange(range.base)),
        }
    }

    pub fn map_page(
        &mut self,
        range: &VirtualRange,
        page: usize,
        handle: PhysicalHandle,
    ) -> Result<(), DeviceError> {
        if !self.chunks.contains_key(&handle) {
            return Err(DeviceError::StaleHandle(handle));
        }
        let state = self.range_mut(range)?;
        let page_count = state.range.page_count;
        let slot = state
            .slots
            .get_mut(page)
            .ok_or(DeviceError::IndexOutOfRange { page, page_count })?;
        if slot.is_some() {
            return Err(DeviceError::PageAlreadyMapped { base: range.base, page });
        }
        *slot = Some(handle);
        state.mapped += 1;
        *self.chunks.get_mut(&handle).expect("checked above") += 1;
        self.mapped_pages += 1;
        self.record(DeviceCall::Map { base: range.base, page, handle });
        Ok(())
    }

    pub fn unmap_page(
        &mut self,
        range: &VirtualRange,
        page: usize,
    ) -> Result<PhysicalHandle, DeviceError> {
        let state = self.range_mut(range)?;
        let page_count = state.range.page_count;
        let slot = state
            .slots
            .get_mut(page)
            .ok_or(DeviceError::IndexOutOfRange { page, page_count })?;
        let handle = slot.take().ok_or(DeviceError::PageNotMapped { base: range.base, page })?;
        state.mapped -= 1;
        let count = self.chunks.get_mut(&handle).expect("mapped chunk is live");
        *count -= 1;
        self.mapped_pages -= 1;
        self.record(DeviceCall::Unmap { base: range.base, page, handle });
        Ok(handle)
    }

    pub fn release_address(&mut self, range: &VirtualRange) -> Result<(), DeviceError> {
        let state = self.range_mut(range)?;
        if state.mapped > 0 {
            return Err(DeviceError::RangeStillMapped { base: range.base, mapped: state.mapped });
        }
        self.ranges.remove(&range.base);
        self.reserved_virtual_bytes -= range.length_bytes;
        self.record(DeviceCall::Release { base: range.base });
        Ok(())
    }

    pub fn destroy_chunk(&mut self, handle: PhysicalHandle) -> Result<(), DeviceError> {
        match self.chunks.get(&handle) {
            None => Err(DeviceError::StaleHandle(handle)),
            Some(&map_count) if map_count > 0 => {
                Err(DeviceError::ChunkStillMapped { handle, map_count })
            }
            Some(_) => {
                self.chunks.remove(&handle);
                self.record(DeviceCall::Destroy { handle });
                Ok(())
            }
        }
    }

    /// Resolves a page slot to the chunk backing it.
    pub fn translate(&self, range: &VirtualRange, page: usize) -> Option<PhysicalHandle> {
        self.ranges.get(&range.base)?.slots.get(page).copied().flatten()
    }

    pub fn map_count(&self, handle: PhysicalHandle) -> Option<usize> {
        self.chunks.get(&handle).copied()
    }

    pub fn is_live(&self, handle: PhysicalHandle) -> bool {
        self.chunks.contains_key(&handle)
    }

    pub fn live_handles(&self) -> impl Iterator<Item = (PhysicalHandle, usize)> + '_ {
        self.chunks.iter().map(|(h, c)| (*h, *c))
    }

    pub fn live_ranges(&self) -> impl Iterator<Item = VirtualRange> + '_ {
        self.ranges.values().map(|s| s.range)
    }

    /// Page slots of a live range, for exhaustive scans.
    pub fn slots(&self, range: &VirtualRange) -> Option<&[Option<PhysicalHandle>]> {
        self.ranges.get(&range.base).map(|s| s.slots.as_slice())
    }

    pub fn call_count(&self) -> usize {
        self.log.len()
    }
}
