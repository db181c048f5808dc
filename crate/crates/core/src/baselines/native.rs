use std::collections::BTreeMap;

use crate::device::DeviceConfig;
use crate::metrics::{BreakdownParts, MemoryBreakdown};
use crate::ops::ReclaimReport;
use crate::serve::{Admission, AllocatorKind, BackendError, BackendStats, KvBackend, MemOpKind};
use crate::types::{RequestId, TokenId};
use crate::vts::MemAction;

/// Every request gets one contiguous region sized for `max_seq_len` tokens.
#[derive(Debug, Clone)]
pub struct NativeBackend {
    device: DeviceConfig,
    bytes_per_token: u64,
    max_seq_len: usize,
    /// Live token count per admitted request.
    regions: BTreeMap<RequestId, usize>,
}

impl NativeBackend {
    pub fn new(device: DeviceConfig, bytes_per_token: u64, max_seq_len: usize) -> Self {
        Self { device, bytes_per_token, max_seq_len, regions: BTreeMap::new() }
    }

    pub fn region_bytes(&self) -> u64 {
        self.max_seq_len as u64 * self.bytes_per_token
    }

    fn activation(&self, n: usize) -> u64 {
        n as u64 * self.device.activation_bytes_per_request
    }

    fn allocated(&self) -> u64 {
        self.regions.len() as u64 * self.region_bytes()
    }

    fn free(&self) -> u64 {
        self.device.capacity_bytes - self.device.weights_bytes - self.activation(self.regions.len()) - self.allocated()
    }

    fn live_tokens(&self) -> u64 {
        self.regions.values().map(|&t| t as u64).sum()
    }

    fn full_action(&self, before: usize) -> MemAction {
        MemAction {
            device_calls: 1,
            acquired_chunks: 0,
            created_chunks: 0,
            provisioned_before: before,
            provisioned_after: self.max_seq_len,
        }
    }
}

impl KvBackend for NativeBackend {
    fn kind(&self) -> AllocatorKind {
        AllocatorKind::Native
    }

    fn admit(&mut self, id: RequestId, prompt: &[TokenId], _try_prefix: bool) -> Result<Admission, BackendError> {
        if prompt.len() > self.max_seq_len {
            return Err(BackendError::ExceedsMaxSeqLen { requested: prompt.len(), max: self.max_seq_len });
        }
        if self.regions.contains_key(&id) {
            return Err(BackendError::Internal(format!("{id} admitted twice")));
        }
        let need = self.region_bytes() + self.device.activation_bytes_per_request;
        if need > self.free() {
            return Err(BackendError::OutOfMemory(format!(
                "contiguous region of {} bytes does not fit in {} free",
                need,
                self.free()
            )));
        }
        self.regions.insert(id, prompt.len());
        Ok(Admission { matched_tokens: 0, actions: vec![(MemOpKind::Create, self.full_action(0))] })
    }

    fn decode_extend(&mut self, id: RequestId) -> Result<MemAction, BackendError> {
        let t = *self.regions.get(&id).ok_or_else(|| BackendError::Internal(format!("{id} not admitted")))?;
        if t + 1 > self.max_seq_len {
            return Err(BackendError::ExceedsMaxSeqLen { requested: t + 1, max: self.max_seq_len });
        }
        Ok(MemAction { provisioned_before: self.max_seq_len, provisioned_after: self.max_seq_len, ..Default::default() })
    }

    fn commit(&mut self, id: RequestId, tokens: &[TokenId]) -> Result<(), BackendError> {
        let max = self.max_seq_len;
        let t = self.regions.get_mut(&id).ok_or_else(|| BackendError::Internal(format!("{id} not admitted")))?;
        if *t + tokens.len() > max {
            return Err(BackendError::ExceedsMaxSeqLen { requested: *t + tokens.len(), max });
        }
        *t += tokens.len();
        Ok(())
    }

    fn record_prefix(&mut self, _id: RequestId) -> Result<usize, BackendError> {
        Ok(0)
    }

    fn release(&mut self, id: RequestId) -> Result<MemAction, BackendError> {
        Ok(match self.regions.remove(&id) {
            Some(_) => MemAction { device_calls: 1, provisioned_before: self.max_seq_len, ..Default::default() },
            None => MemAction::default(),
        })
    }

    fn evict_cache(&mut self) -> Result<bool, BackendError> {
        Ok(false)
    }

    fn breakdown(&self) -> MemoryBreakdown {
        BreakdownParts {
            capacity: self.device.capacity_bytes,
            weights: self.device.weights_bytes,
            activation: self.activation(self.regions.len()),
            kv_used: self.live_tokens() * self.bytes_per_token,
            kv_allocated: self.allocated(),
            lookahead: 0,
            pinned: 0,
            retained: 0,
            other_reserved: 0,
            active_requests: self.regions.len() as u64,
        }
        .into()
    }

    fn stats(&self) -> BackendStats {
        BackendStats {
            created_bytes: self.allocated(),
            mapped_bytes: self.allocated(),
            used_bytes: self.live_tokens() * self.bytes_per_token,
            reserved_virtual_bytes: 0,
            free_bytes: self.free(),
        }
    }

    fn finish_run(&mut self, _evict_prefix: bool) -> Result<Option<ReclaimReport>, BackendError> {
        Ok(None)
    }
}
