//! The allocator interface the step loop drives, and its vTensor implementation.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::MemoryBreakdown;
use crate::ops::ReclaimReport;
use crate::pool::ChunkState;
use crate::types::{RequestId, TokenId};
use crate::vts::{MemAction, Vts, VtsConfig, VtsError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AllocatorKind {
    Native,
    Paged,
    #[serde(rename = "vtensor")]
    VTensor,
}

impl AllocatorKind {
    pub const ALL: [AllocatorKind; 3] = [AllocatorKind::Native, AllocatorKind::Paged, AllocatorKind::VTensor];

    pub fn name(&self) -> &'static str {
        match self {
            AllocatorKind::Native => "native",
            AllocatorKind::Paged => "paged",
            AllocatorKind::VTensor => "vtensor",
        }
    }
}

impl std::fmt::Display for AllocatorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for AllocatorKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "native" => Ok(AllocatorKind::Native),
            "paged" => Ok(AllocatorKind::Paged),
            "vtensor" => Ok(AllocatorKind::VTensor),
            other => Err(format!("unknown allocator `{other}` (native|paged|vtensor)")),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BackendError {
    #[error("out of memory: {0}")]
    OutOfMemory(String),
    #[error("{requested} tokens exceed the maximum sequence length {max}")]
    ExceedsMaxSeqLen { requested: usize, max: usize },
    #[error("allocator fault: {0}")]
    Internal(String),
}

impl From<VtsError> for BackendError {
    fn from(e: VtsError) -> Self {
        match e {
            e if e.is_out_of_memory() => BackendError::OutOfMemory(e.to_string()),
            VtsError::ExceedsMaxSeqLen { requested, max } => {
                BackendError::ExceedsMaxSeqLen { requested, max }
            }
            e => BackendError::Internal(e.to_string()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MemOpKind {
    Create,
    PrefixMatch,
    Extend,
    PrefixRecord,
    Release,
}

/// Memory work done to start a request's prefill.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Admission {
    pub matched_tokens: usize,
    pub actions: Vec<(MemOpKind, MemAction)>,
}

impl Admission {
    pub fn acquired_chunks(&self) -> usize {
        self.actions.iter().map(|(_, a)| a.acquired_chunks).sum()
    }

    pub fn created_chunks(&self) -> usize {
        self.actions.iter().map(|(_, a)| a.created_chunks).sum()
    }

    pub fn device_calls(&self) -> usize {
        self.actions.iter().map(|(_, a)| a.device_calls).sum()
    }

    pub fn provisioned(&self) -> usize {
        self.actions.last().map(|(_, a)| a.provisioned_after).unwrap_or(0)
    }
}

/// Report-level device counters (the CSV columns).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendStats {
    /// Physical bytes the allocator holds on the device.
    pub created_bytes: u64,
    /// Of those, bytes currently backing some request or record.
    pub mapped_bytes: u64,
    pub used_bytes: u64,
    pub reserved_virtual_bytes: u64,
    pub free_bytes: u64,
}

/// A KV-cache allocator driven by the serving step loop.
pub trait KvBackend {
    fn kind(&self) -> AllocatorKind;

    /// Provisions memory for a prompt. With `try_prefix`, a recorded prefix
    /// may be reused.
    fn admit(&mut self, id: RequestId, prompt: &[TokenId], try_prefix: bool) -> Result<Admission, BackendError>;

    /// Ensures room for the token the next decode step writes.
    fn decode_extend(&mut self, id: RequestId) -> Result<MemAction, BackendError>;

    /// Marks generated tokens as written to the cache.
    fn commit(&mut self, id: RequestId, tokens: &[TokenId]) -> Result<(), BackendError>;

    /// Offers a finished request's tokens for prefix reuse. Returns device calls issued.
    fn record_prefix(&mut self, id: RequestId) -> Result<usize, BackendError>;

    fn release(&mut self, id: RequestId) -> Result<MemAction, BackendError>;

    /// Drops one cached prefix to make room. Returns false when nothing is cached.
    fn evict_cache(&mut self) -> Result<bool, BackendError>;

    fn breakdown(&self) -> MemoryBreakdown;

    fn stats(&self) -> BackendStats;

    /// End-of-run memory emptying, where the allocator supports it.
    fn finish_run(&mut self, evict_prefix: bool) -> Result<Option<ReclaimReport>, BackendError>;
}

/// vTensor-backed KV cache.
#[derive(Debug, Clone)]
pub struct VTensorBackend {
    vts: Vts,
    bytes_per_token: u64,
}

impl VTensorBackend {
    pub fn new(cfg: VtsConfig, bytes_per_token: u64) -> Result<Self, BackendError> {
        Ok(Self { vts: Vts::new(cfg)?, bytes_per_token })
    }

    pub fn vts(&self) -> &Vts {
        &self.vts
    }

    fn set_active(&mut self, n: usize) -> Result<(), BackendError> {
        self.vts
            .manager_mut()
            .device_mut()
            .set_active_requests(n as u64)
            .map_err(|e| BackendError::OutOfMemory(e.to_string()))
    }

    fn active(&self) -> usize {
        self.vts.mems().count()
    }
}

impl KvBackend for VTensorBackend {
    fn kind(&self) -> AllocatorKind {
        AllocatorKind::VTensor
    }

    fn admit(&mut self, id: RequestId, prompt: &[TokenId], try_prefix: bool) -> Result<Admission, BackendError> {
        let active = self.active();
        self.set_active(active + 1)?;
        let result = (|| {
            let mut adm = Admission::default();
            let mut matched = 0;
            if try_prefix {
                let (m, action) = self.vts.prefix_match(id, prompt)?;
                matched = m;
                if m > 0 {
                    adm.actions.push((MemOpKind::PrefixMatch, action));
                }
            }
            if matched == 0 {
                adm.actions.push((MemOpKind::Create, self.vts.create(id, prompt)?));
            }
            adm.matched_tokens = matched;
            match self.vts.prefill_extends(id) {
                Ok(ext) => adm.actions.extend(ext.map(|a| (MemOpKind::Extend, a))),
                Err(e) => {
                    self.vts.release(id)?;
                    return Err(e);
                }
            }
            Ok(adm)
        })();
        if result.is_err() {
            self.set_active(active)?;
        }
        result.map_err(BackendError::from)
    }

    fn decode_extend(&mut self, id: RequestId) -> Result<MemAction, BackendError> {
        Ok(self.vts.decode_extend(id)?)
    }

    fn commit(&mut self, id: RequestId, tokens: &[TokenId]) -> Result<(), BackendError> {
        Ok(self.vts.commit_tokens(id, tokens)?)
    }

    fn record_prefix(&mut self, id: RequestId) -> Result<usize, BackendError> {
        let mark = self.vts.manager().device().call_count();
        self.vts.prefix_record(id)?;
        Ok(self.vts.manager().device().call_count() - mark)
    }

    fn release(&mut self, id: RequestId) -> Result<MemAction, BackendError> {
        let had = self.vts.mem(id).is_some();
        let action = self.vts.release(id)?;
        if had {
            let n = self.active();
            self.set_active(n)?;
        }
        Ok(action)
    }

    fn evict_cache(&mut self) -> Result<bool, BackendError> {
        self.vts.manager_mut().evict_lru().map_err(|e| BackendError::Internal(e.to_string()))
    }

    fn breakdown(&self) -> MemoryBreakdown {
        self.vts.breakdown(self.bytes_per_token)
    }

    fn stats(&self) -> BackendStats {
        let mgr = self.vts.manager();
        let dev = mgr.device().stats();
        let chunk = mgr.config().device.chunk_size_bytes;
        let mapped = mgr.pset().iter().filter(|e| e.state == ChunkState::Active).count() as u64;
        BackendStats {
            created_bytes: dev.created_bytes,
            mapped_bytes: mapped * chunk,
            used_bytes: self.breakdown().kv_used,
            reserved_virtual_bytes: dev.reserved_virtual_bytes,
            free_bytes: dev.free_bytes,
        }
    }

    fn finish_run(&mut self, evict_prefix: bool) -> Result<Option<ReclaimReport>, BackendError> {
        Ok(Some(self.vts.empty_memory(evict_prefix)?))
    }
}
