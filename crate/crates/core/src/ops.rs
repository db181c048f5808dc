//! vTensor operations: allocation (`v_alloc`, `p_alloc`, `map`), lazy
//! deallocation (`unmap_space`, `v_free`, `p_free`, `empty_memory`) and the
//! prefix-tree operations (`r_push`, `r_prefix_match`).
//!
//! Virtual and physical allocation are decoupled: `v_alloc` only ever
//! reserves address space and `p_alloc` is the only operation that creates
//! chunks. Unmapping never destroys anything; chunks return to the pSet free
//! list and are destroyed only by `p_free`/`empty_memory`.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::device::{Device, DeviceConfig, DeviceError, PhysicalHandle};
use crate::pool::{
    ChunkState, PSet, PoolError, RadixTree, SpaceId, SpaceOwner, SpaceState, VSet, VTensor,
    VirtualSpace,
};
use crate::types::{align_down, div_ceil, RecordId, RequestId, TokenId};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum OpsError {
    #[error(transparent)]
    Device(#[from] DeviceError),
    #[error(transparent)]
    Pool(#[from] PoolError),
    #[error("{requested} tokens exceed the maximum sequence length {max}")]
    ExceedsMaxSeqLen { requested: usize, max: usize },
    #[error("cannot map {chunks} chunk(s) onto {space}: only {remaining} page(s) left")]
    CapacityExceeded { space: SpaceId, chunks: usize, remaining: usize },
    #[error("chunk {0} listed twice in one map call")]
    DuplicateChunk(PhysicalHandle),
    #[error("unknown prefix record {0:?}")]
    UnknownRecord(RecordId),
    #[error("vtensor on {space} has {mapped} mapped page(s), record needs {needed}")]
    RecordNotBacked { space: SpaceId, mapped: usize, needed: usize },
    #[error("{space} backs prefix record {record:?}; evict the record instead")]
    RecordSpace { space: SpaceId, record: RecordId },
}

impl OpsError {
    pub fn is_out_of_memory(&self) -> bool {
        matches!(self, OpsError::Device(DeviceError::DeviceOutOfMemory { .. }))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManagerConfig {
    pub device: DeviceConfig,
    pub tokens_per_chunk: usize,
    pub max_seq_len: usize,
    /// Cap on the total pages held by prefix records; least-recently-matched
    /// records are evicted beyond it. `None` keeps every record.
    pub prefix_cache_max_chunks: Option<usize>,
}

/// A recorded prefix: a record-owned space whose leading pages map the
/// donor's fully filled chunks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PrefixRecord {
    pub id: RecordId,
    pub vt: VTensor,
    pub donor: Option<RequestId>,
    pub pages: usize,
    last_used: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReclaimReport {
    pub chunks_destroyed: usize,
    pub spaces_released: usize,
    pub records_evicted: usize,
    pub physical_bytes: u64,
    pub virtual_bytes: u64,
}

/// The vTensor manager: owns the device, the pool and the prefix records.
#[derive(Debug, Clone)]
pub struct VTensorManager {
    cfg: ManagerConfig,
    space_pages: usize,
    device: Device,
    vset: VSet,
    pset: PSet,
    rtree: RadixTree,
    records: BTreeMap<RecordId, PrefixRecord>,
    next_record: u64,
    clock: u64,
}

impl VTensorManager {
    pub fn new(cfg: ManagerConfig) -> Result<Self, OpsError> {
        assert!(cfg.tokens_per_chunk > 0 && cfg.max_seq_len > 0);
        Ok(Self {
            space_pages: div_ceil(cfg.max_seq_len, cfg.tokens_per_chunk),
            device: Device::new(cfg.device)?,
            vset: VSet::new(),
            pset: PSet::new(),
            rtree: RadixTree::new(cfg.tokens_per_chunk),
            records: BTreeMap::new(),
            next_record: 0,
            clock: 0,
            cfg,
        })
    }

    pub fn config(&self) -> &ManagerConfig {
        &self.cfg
    }

    pub fn tokens_per_chunk(&self) -> usize {
        self.cfg.tokens_per_chunk
    }

    /// Pages per virtual space; every space has the same length.
    pub fn space_pages(&self) -> usize {
        self.space_pages
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn device_mut(&mut self) -> &mut Device {
        &mut self.device
    }

    pub fn vset(&self) -> &VSet {
        &self.vset
    }

    pub fn pset(&self) -> &PSet {
        &self.pset
    }

    pub fn rtree(&self) -> &RadixTree {
        &self.rtree
    }

    pub fn space(&self, id: SpaceId) -> Option<&VirtualSpace> {
        self.vset.get(id)
    }

    pub fn records(&self) -> impl Iterator<Item = &PrefixRecord> {
        self.records.values()
    }

    pub fn record(&self, id: RecordId) -> Option<&PrefixRecord> {
        self.records.get(&id)
    }

    /// Takes `n` chunks: reuses up to `n` Free entries and creates the rest.
    /// All-or-nothing: on failure the free list and device are left as found.
    pub fn p_alloc(&mut self, n: usize) -> Result<Vec<PhysicalHandle>, OpsError> {
        if n == 0 {
            return Ok(Vec::new());
        }
        let reusable = self.pset.free_count().min(n);
        let to_create = (n - reusable) as u64;
        let need = to_create * self.cfg.device.chunk_size_bytes;
        let free = self.device.free_bytes();
        if need > free {
            return Err(DeviceError::DeviceOutOfMemory { requested: need, free }.into());
        }
        let mut handles = self.pset.take_free(n);
        let reused = handles.len();
        while handles.len() < n {
            match self.device.create_chunk() {
                Ok(h) => {
                    self.pset.insert_created(h);
                    handles.push(h);
                }
                Err(e) => {
                    for h in handles.drain(reused..) {
                        self.pset.remove_pending(h);
                        self.device.destroy_chunk(h)?;
                    }
                    for h in handles {
                        self.pset.give_back(h)?;
                    }
                    return Err(e.into());
                }
            }
        }
        Ok(handles)
    }

    /// Returns an unmapped virtual space of `max_seq_len` tokens, recycled
    /// from the vSet when possible.
    pub fn v_alloc(&mut self, size_tokens: usize, owner: SpaceOwner) -> Result<SpaceId, OpsError> {
        if size_tokens > self.cfg.max_seq_len {
            return Err(OpsError::ExceedsMaxSeqLen {
                requested: size_tokens,
                max: self.cfg.max_seq_len,
            });
        }
        if let Some(id) = self.vset.acquire(self.space_pages, owner) {
            return Ok(id);
        }
        let range = self
            .device
            .reserve_address(self.space_pages as u64 * self.cfg.device.page_size_bytes())?;
        Ok(self.vset.insert_reserved(range, owner))
    }

    /// Maps `chunks` onto the next unmapped pages of `space`, in order.
    pub fn map(&mut self, space: SpaceId, chunks: &[PhysicalHandle]) -> Result<(), OpsError> {
        let s = self.vset.get(space).ok_or(PoolError::UnknownSpace(space))?;
        if s.state != SpaceState::InUse {
            return Err(PoolError::SpaceNotInUse(space).into());
        }
        if chunks.len() > s.remaining_pages() {
            return Err(OpsError::CapacityExceeded {
                space,
                chunks: chunks.len(),
                remaining: s.remaining_pages(),
            });
        }
        // Validate everything up front so a rejected call changes nothing.
        let mut seen = BTreeSet::new();
        for &h in chunks {
            if !seen.insert(h) {
                return Err(OpsError::DuplicateChunk(h));
            }
            let entry = self.pset.get(h).ok_or(PoolError::UnknownHandle(h))?;
            if entry.state == ChunkState::Free {
                return Err(PoolError::HandleIsFree(h).into());
            }
            if entry.referrers.contains(&space) {
                return Err(PoolError::DuplicateReferrer { handle: h, space }.into());
            }
        }
        let range = s.range;
        for &h in chunks {
            let page = self.vset.push_mapping(space, h)?;
            self.device.map_page(&range, page, h)?;
            self.pset.incref(h, space)?;
        }
        Ok(())
    }

    /// Unmaps every page of `space` and returns it to the vSet. Chunks whose
    /// count drops to zero go to the free list; nothing is destroyed.
    /// Unmapping an Available space is a no-op.
    pub fn unmap_space(&mut self, space: SpaceId) -> Result<(), OpsError> {
        let s = self.vset.get(space).ok_or(PoolError::UnknownSpace(space))?;
        if s.state == SpaceState::Available {
            return Ok(());
        }
        if let Some(SpaceOwner::Prefix(record)) = s.owner {
            if self.records.contains_key(&record) {
                return Err(OpsError::RecordSpace { space, record });
            }
        }
        let range = s.range;
        while let Some((page, handle)) = self.vset.pop_mapping(space) {
            let unmapped = self.device.unmap_page(&range, page)?;
            debug_assert_eq!(unmapped, handle);
            self.pset.decref(handle, space)?;
        }
        self.vset.release(space)?;
        Ok(())
    }

    /// Returns a pending (taken but never mapped) chunk to the free list.
    pub fn p_return(&mut self, handle: PhysicalHandle) -> Result<(), OpsError> {
        Ok(self.pset.give_back(handle)?)
    }

    pub fn v_free(&mut self, space: SpaceId) -> Result<u64, OpsError> {
        let s = self.vset.remove(space)?;
        self.device.release_address(&s.range)?;
        Ok(s.range.length_bytes)
    }

    pub fn p_free(&mut self, handle: PhysicalHandle) -> Result<(), OpsError> {
        self.pset.remove_free(handle)?;
        self.device.destroy_chunk(handle)?;
        Ok(())
    }

    /// Destroys every Free chunk and releases every Available space.
    /// Prefix records survive unless `evict_prefix` is set.
    pub fn empty_memory(&mut self, evict_prefix: bool) -> Result<ReclaimReport, OpsError> {
        let mut report = ReclaimReport::default();
        if evict_prefix {
            let ids: Vec<_> = self.records.keys().copied().collect();
            for id in ids {
                self.evict_record(id)?;
                report.records_evicted += 1;
            }
        }
        for h in self.pset.free_handles() {
            self.p_free(h)?;
            report.chunks_destroyed += 1;
            report.physical_bytes += self.cfg.device.chunk_size_bytes;
        }
        for id in self.vset.available_ids() {
            report.virtual_bytes += self.v_free(id)?;
            report.spaces_released += 1;
        }
        Ok(report)
    }

    /// Records the chunk-aligned prefix of `vt` for later reuse. The record
    /// gets its own space mapping the donor's fully filled chunks, which pins
    /// them. Returns `None` when less than one chunk is filled.
    pub fn r_push(&mut self, vt: &VTensor) -> Result<Option<RecordId>, OpsError> {
        let tpc = self.cfg.tokens_per_chunk;
        let aligned = align_down(vt.token_count.min(vt.tokens.len()), tpc);
        if aligned == 0 {
            return Ok(None);
        }
        let pages = aligned / tpc;
        let src = self.vset.get(vt.space).ok_or(PoolError::UnknownSpace(vt.space))?;
        if src.mapped < pages {
            return Err(OpsError::RecordNotBacked { space: vt.space, mapped: src.mapped, needed: pages });
        }
        let handles: Vec<_> = src.mapped_handles().take(pages).collect();

        let id = RecordId(self.next_record);
        self.next_record += 1;
        let space = self.v_alloc(aligned, SpaceOwner::Prefix(id))?;
        if let Err(e) = self.map(space, &handles) {
            self.unmap_space(space)?;
            return Err(e);
        }
        self.clock += 1;
        let key = vt.tokens[..aligned].to_vec();
        let record = PrefixRecord {
            id,
            vt: VTensor {
                space,
                token_count: aligned,
                capacity_tokens: self.space_pages * tpc,
                tokens: key.clone(),
                owner: None,
            },
            donor: vt.owner,
            pages,
            last_used: self.clock,
        };
        self.records.insert(id, record);
        if let Some(old) = self.rtree.insert(&key, id) {
            self.drop_record(old)?;
        }
        self.enforce_prefix_cap()?;
        Ok(Some(id))
    }

    /// Looks up the longest chunk-aligned recorded prefix of `tokens`. The
    /// record stays in the tree; its recency is refreshed.
    pub fn r_prefix_match(&mut self, tokens: &[TokenId]) -> Option<(RecordId, usize)> {
        let (id, matched) = self.rtree.match_prefix(tokens)?;
        self.clock += 1;
        self.records.get_mut(&id).expect("tree records are registered").last_used = self.clock;
        Some((id, matched))
    }

    /// Removes a record from the tree and unpins its chunks.
    pub fn evict_record(&mut self, id: RecordId) -> Result<(), OpsError> {
        let key = self.records.get(&id).ok_or(OpsError::UnknownRecord(id))?.vt.tokens.clone();
        self.rtree.remove(&key);
        self.drop_record(id)
    }

    fn drop_record(&mut self, id: RecordId) -> Result<(), OpsError> {
        let rec = self.records.remove(&id).ok_or(OpsError::UnknownRecord(id))?;
        self.unmap_space(rec.vt.space)
    }

    /// Evicts the least-recently-used record. Returns false if there is none.
    pub fn evict_lru(&mut self) -> Result<bool, OpsError> {
        let Some(id) = self.records.values().min_by_key(|r| (r.last_used, r.id)).map(|r| r.id) else {
            return Ok(false);
        };
        self.evict_record(id)?;
        Ok(true)
    }

    fn enforce_prefix_cap(&mut self) -> Result<(), OpsError> {
        if let Some(cap) = self.cfg.prefix_cache_max_chunks {
            while self.records.values().map(|r| r.pages).sum::<usize>() > cap {
                self.evict_lru()?;
            }
        }
        Ok(())
    }

    /// Chunks referenced only by prefix-record spaces.
    pub fn pinned_chunks(&self) -> usize {
        self.pset
            .iter()
            .filter(|e| {
                e.state == ChunkState::Active
                    && e.referrers.iter().all(|s| {
                        matches!(self.vset.get(*s).and_then(|v| v.owner), Some(SpaceOwner::Prefix(_)))
                    })
            })
            .count()
    }

    pub fn pinned_bytes(&self) -> u64 {
        self.pinned_chunks() as u64 * self.cfg.device.chunk_size_bytes
    }

    pub fn retained_bytes(&self) -> u64 {
        self.pset.free_count() as u64 * self.cfg.device.chunk_size_bytes
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::device::{DeviceCall, MIB};

    const OWNER: SpaceOwner = SpaceOwner::Request(RequestId(0));

    fn manager(chunks: u64, tpc: usize, max_seq: usize) -> VTensorManager {
        VTensorManager::new(ManagerConfig {
            device: DeviceConfig {
                capacity_bytes: chunks * 2 * MIB,
                chunk_size_bytes: 2 * MIB,
                weights_bytes: 0,
                activation_bytes_per_request: 0,
            },
            tokens_per_chunk: tpc,
            max_seq_len: max_seq,
            prefix_cache_max_chunks: None,
        })
        .unwrap()
    }

    fn creates(m: &VTensorManager, from: usize) -> usize {
        m.device().call_log()[from..].iter().filter(|c| c.is_create()).count()
    }

    #[test]
    fn p_alloc_reuses_then_creates() {
        let mut m = manager(16, 32, 256);
        let s = m.v_alloc(256, OWNER).unwrap();
        let first = m.p_alloc(3).unwrap();
        m.map(s, &first).unwrap();
        m.unmap_space(s).unwrap();
        assert_eq!(m.pset().free_count(), 3);
        let mark = m.device().call_count();
        let before = m.device().created_bytes();
        let got = m.p_alloc(5).unwrap();
        assert_eq!(got.len(), 5);
        assert_eq!(&got[..3], &first[..]);
        assert_eq!(creates(&m, mark), 2);
        assert_eq!(m.device().created_bytes() - before, 4 * MIB);
    }

    #[test]
    fn p_alloc_zero_makes_no_calls() {
        let mut m = manager(4, 32, 256);
        assert!(m.p_alloc(0).unwrap().is_empty());
        assert_eq!(m.device().call_count(), 0);
    }

    #[test]
    fn p_alloc_is_all_or_nothing() {
        let mut m = manager(4, 32, 256);
        let s = m.v_alloc(256, OWNER).unwrap();
        let h = m.p_alloc(2).unwrap();
        m.map(s, &h[..1]).unwrap();
        m.p_return(h[1]).unwrap();
        let created = m.device().created_bytes();
        let free_list = m.pset().free_handles();
        let err = m.p_alloc(4).unwrap_err();
        assert!(err.is_out_of_memory());
        assert_eq!(m.device().created_bytes(), created);
        assert_eq!(m.pset().free_handles(), free_list);
    }

    #[test]
    fn v_alloc_reserves_without_physical_memory() {
        let mut m = manager(4, 32, 4096);
        let s = m.v_alloc(4096, OWNER).unwrap();
        assert_eq!(m.space(s).unwrap().page_count(), 128);
        assert_eq!(m.device().created_bytes(), 0);
        assert!(m.device().call_log().iter().all(|c| c.is_reserve()));
        m.unmap_space(s).unwrap();
        assert_eq!(m.v_alloc(4096, OWNER).unwrap(), s);
        assert!(matches!(m.v_alloc(4097, OWNER), Err(OpsError::ExceedsMaxSeqLen { .. })));
    }

    #[test]
    fn map_appends_and_checks_capacity() {
        let mut m = manager(16, 32, 256);
        let s = m.v_alloc(256, OWNER).unwrap();
        let h = m.p_alloc(3).unwrap();
        m.map(s, &h).unwrap();
        let space = m.space(s).unwrap();
        assert_eq!(space.mapped, 3);
        assert!(space.page_table[3..].iter().all(Option::is_none));
        m.map(s, &[]).unwrap();
        let more = m.p_alloc(6).unwrap();
        assert!(matches!(m.map(s, &more), Err(OpsError::CapacityExceeded { remaining: 5, .. })));
        assert_eq!(m.space(s).unwrap().mapped, 3);
        assert!(matches!(m.map(s, &[h[0]]), Err(OpsError::Pool(PoolError::DuplicateReferrer { .. }))));
    }

    #[test]
    fn unmap_is_lazy_and_idempotent() {
        let mut m = manager(16, 32, 256);
        let s = m.v_alloc(256, OWNER).unwrap();
        let h = m.p_alloc(4).unwrap();
        m.map(s, &h).unwrap();
        let created = m.device().created_bytes();
        let mark = m.device().call_count();
        m.unmap_space(s).unwrap();
        assert_eq!(m.device().created_bytes(), created);
        assert_eq!(m.pset().free_count(), 4);
        assert!(m.device().call_log()[mark..].iter().all(|c| !c.is_destroy()));
        m.unmap_space(s).unwrap();
        assert_eq!(m.space(s).unwrap().state, SpaceState::Available);
    }

    #[test]
    fn p_free_rejects_active_chunks() {
        let mut m = manager(16, 32, 256);
        let s = m.v_alloc(256, OWNER).unwrap();
        let h = m.p_alloc(2).unwrap();
        m.map(s, &h).unwrap();
        assert!(m.p_free(h[0]).is_err());
        m.unmap_space(s).unwrap();
        m.p_free(h[0]).unwrap();
        assert_eq!(m.device().created_bytes(), 2 * MIB);
        assert!(m.v_free(s).is_ok());
    }

    #[test]
    fn empty_memory_reclaims_everything_but_pins() {
        let mut m = manager(16, 2, 16);
        assert_eq!(m.empty_memory(false).unwrap(), ReclaimReport::default());
        let s = m.v_alloc(16, OWNER).unwrap();
        let h = m.p_alloc(3).unwrap();
        m.map(s, &h).unwrap();
        let vt = VTensor {
            space: s,
            token_count: 5,
            capacity_tokens: 16,
            tokens: vec![1, 2, 3, 4, 5],
            owner: Some(RequestId(0)),
        };
        let rid = m.r_push(&vt).unwrap().unwrap();
        assert_eq!(m.record(rid).unwrap().pages, 2);
        m.unmap_space(s).unwrap();
        // the two full chunks stay pinned, the partial one is free
        assert_eq!(m.pset().get(h[0]).unwrap().state, ChunkState::Active);
        assert_eq!(m.pset().get(h[2]).unwrap().state, ChunkState::Free);
        let report = m.empty_memory(false).unwrap();
        assert_eq!(report.chunks_destroyed, 1);
        assert_eq!(m.device().created_bytes(), m.pinned_bytes());
        assert_eq!(m.pinned_chunks(), 2);
        assert_eq!(m.empty_memory(false).unwrap(), ReclaimReport::default());
        let all = m.empty_memory(true).unwrap();
        assert_eq!(all.records_evicted, 1);
        assert_eq!(m.device().created_bytes(), 0);
        assert_eq!(m.device().stats().reserved_virtual_bytes, 0);
    }

    #[test]
    fn push_and_match() {
        let mut m = manager(16, 2, 16);
        let s = m.v_alloc(16, OWNER).unwrap();
        let h = m.p_alloc(2).unwrap();
        m.map(s, &h).unwrap();
        let vt = VTensor { space: s, token_count: 4, capacity_tokens: 16, tokens: vec![7, 8, 9, 10], owner: None };
        let rid = m.r_push(&vt).unwrap().unwrap();
        assert_eq!(m.r_prefix_match(&[7, 8, 9, 10]), Some((rid, 4)));
        assert_eq!(m.r_prefix_match(&[1, 2]), None);
        assert_eq!(m.rtree().len(), 1);
        let rec_space = m.record(rid).unwrap().vt.space;
        let shared: Vec<_> = m.space(rec_space).unwrap().mapped_handles().collect();
        assert_eq!(shared, h);
        // re-recording the same key replaces the record without unpinning
        let again = m.r_push(&vt).unwrap().unwrap();
        assert_ne!(again, rid);
        assert!(m.record(rid).is_none());
        assert_eq!(m.pset().get(h[0]).unwrap().ref_count(), 2);
        // too short to share
        let short = VTensor { token_count: 1, ..vt.clone() };
        assert_eq!(m.r_push(&short).unwrap(), None);
    }

    #[test]
    fn prefix_cap_evicts_lru() {
        let mut m = VTensorManager::new(ManagerConfig {
            prefix_cache_max_chunks: Some(2),
            ..*manager(16, 2, 16).config()
        })
        .unwrap();
        let mut ids = Vec::new();
        for t in 0..3u32 {
            let s = m.v_alloc(16, OWNER).unwrap();
            let h = m.p_alloc(1).unwrap();
            m.map(s, &h).unwrap();
            let vt = VTensor { space: s, token_count: 2, capacity_tokens: 16, tokens: vec![t, t], owner: None };
            ids.push(m.r_push(&vt).unwrap().unwrap());
            if t == 1 {
                // touch the first record so the second is older
                m.r_prefix_match(&[0, 0]);
            }
            m.unmap_space(s).unwrap();
        }
        assert!(m.record(ids[0]).is_some());
        assert!(m.record(ids[1]).is_none());
        assert!(m.record(ids[2]).is_some());
    }

    #[test]
    fn v_alloc_never_creates_chunks() {
        let mut m = manager(16, 2, 16);
        let h = m.p_alloc(2).unwrap();
        let mark = m.device().call_count();
        let s = m.v_alloc(16, OWNER).unwrap();
        assert!(m.device().call_log()[mark..].iter().all(|c| matches!(c, DeviceCall::Reserve { .. })));
        m.map(s, &h).unwrap();
    }

    #[test]
    fn record_space_cannot_be_unmapped_directly() {
        let mut m = manager(16, 2, 8);
        let s = m.v_alloc(8, OWNER).unwrap();
        let hs = m.p_alloc(1).unwrap();
        m.map(s, &hs).unwrap();
        let vt = VTensor { space: s, token_count: 2, capacity_tokens: 8, tokens: vec![1, 2], owner: None };
        let id = m.r_push(&vt).unwrap().unwrap();
        let rs = m.record(id).unwrap().vt.space;
        assert!(matches!(m.unmap_space(rs), Err(OpsError::RecordSpace { .. })));
        m.evict_record(id).unwrap();
        assert_eq!(m.space(rs).unwrap().state, SpaceState::Available);
    }
}
