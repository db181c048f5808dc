use std::collections::{BTreeMap, BTreeSet};

use crate::device::DeviceConfig;
use crate::metrics::{BreakdownParts, MemoryBreakdown};
use crate::ops::ReclaimReport;
use crate::serve::{Admission, AllocatorKind, BackendError, BackendStats, KvBackend, MemOpKind};
use crate::types::{div_ceil, RequestId, TokenId};
use crate::vts::MemAction;

#[derive(Debug, Clone)]
struct BlockTable {
    blocks: Vec<u32>,
    tokens: usize,
}

/// Claims every byte left after weights and activation headroom as a block
/// pool at construction. The pool never shrinks.
#[derive(Debug, Clone)]
pub struct PagedBackend {
    device: DeviceConfig,
    bytes_per_token: u64,
    block_size_tokens: usize,
    max_seq_len: usize,
    pool_blocks: usize,
    free_blocks: BTreeSet<u32>,
    tables: BTreeMap<RequestId, BlockTable>,
}

impl PagedBackend {
    pub fn new(
        device: DeviceConfig,
        bytes_per_token: u64,
        block_size_tokens: usize,
        max_seq_len: usize,
        activation_headroom_bytes: u64,
    ) -> Result<Self, BackendError> {
        assert!(block_size_tokens > 0);
        let block_bytes = block_size_tokens as u64 * bytes_per_token;
        let avail = device
            .capacity_bytes
            .checked_sub(device.weights_bytes + activation_headroom_bytes)
            .ok_or_else(|| BackendError::OutOfMemory("no memory left for a block pool".into()))?;
        let pool_blocks = (avail / block_bytes) as usize;
        if pool_blocks == 0 {
            return Err(BackendError::OutOfMemory("block pool would be empty".into()));
        }
        Ok(Self {
            device,
            bytes_per_token,
            block_size_tokens,
            max_seq_len,
            pool_blocks,
            free_blocks: (0..pool_blocks as u32).collect(),
            tables: BTreeMap::new(),
        })
    }

    pub fn block_bytes(&self) -> u64 {
        self.block_size_tokens as u64 * self.bytes_per_token
    }

    pub fn pool_bytes(&self) -> u64 {
        self.pool_blocks as u64 * self.block_bytes()
    }

    fn used_blocks(&self) -> usize {
        self.pool_blocks - self.free_blocks.len()
    }

    fn live_tokens(&self) -> u64 {
        self.tables.values().map(|t| t.tokens as u64).sum()
    }

    fn activation(&self) -> u64 {
        self.tables.len() as u64 * self.device.activation_bytes_per_request
    }

    fn take_blocks(&mut self, n: usize) -> Result<Vec<u32>, BackendError> {
        if n > self.free_blocks.len() {
            return Err(BackendError::OutOfMemory(format!(
                "{n} block(s) requested, {} free in pool",
                self.free_blocks.len()
            )));
        }
        Ok((0..n).map(|_| self.free_blocks.pop_first().expect("checked")).collect())
    }

    fn table(&self, id: RequestId) -> Result<&BlockTable, BackendError> {
        self.tables.get(&id).ok_or_else(|| BackendError::Internal(format!("{id} not admitted")))
    }
}

impl KvBackend for PagedBackend {
    fn kind(&self) -> AllocatorKind {
        AllocatorKind::Paged
    }

    fn admit(&mut self, id: RequestId, prompt: &[TokenId], _try_prefix: bool) -> Result<Admission, BackendError> {
        if prompt.len() > self.max_seq_len {
            return Err(BackendError::ExceedsMaxSeqLen { requested: prompt.len(), max: self.max_seq_len });
        }
        if self.tables.contains_key(&id) {
            return Err(BackendError::Internal(format!("{id} admitted twice")));
        }
        let n = div_ceil(prompt.len(), self.block_size_tokens);
        let blocks = self.take_blocks(n)?;
        self.tables.insert(id, BlockTable { blocks, tokens: prompt.len() });
        let action = MemAction {
            acquired_chunks: n,
            provisioned_after: n * self.block_size_tokens,
            ..Default::default()
        };
        Ok(Admission { matched_tokens: 0, actions: vec![(MemOpKind::Create, action)] })
    }

    fn decode_extend(&mut self, id: RequestId) -> Result<MemAction, BackendError> {
        let t = self.table(id)?;
        let (tokens, have) = (t.tokens, t.blocks.len());
        if tokens + 1 > self.max_seq_len {
            return Err(BackendError::ExceedsMaxSeqLen { requested: tokens + 1, max: self.max_seq_len });
        }
        let before = have * self.block_size_tokens;
        if tokens + 1 <= before {
            return Ok(MemAction { provisioned_before: before, provisioned_after: before, ..Default::default() });
        }
        let block = self.take_blocks(1)?;
        let t = self.tables.get_mut(&id).expect("checked");
        t.blocks.extend(block);
        Ok(MemAction {
            acquired_chunks: 1,
            provisioned_before: before,
            provisioned_after: before + self.block_size_tokens,
            ..Default::default()
        })
    }

    fn commit(&mut self, id: RequestId, tokens: &[TokenId]) -> Result<(), BackendError> {
        let bs = self.block_size_tokens;
        let t = self.tables.get_mut(&id).ok_or_else(|| BackendError::Internal(format!("{id} not admitted")))?;
        if t.tokens + tokens.len() > t.blocks.len() * bs {
            return Err(BackendError::Internal(format!("{id} writes past its block table")));
        }
        t.tokens += tokens.len();
        Ok(())
    }

    fn record_prefix(&mut self, _id: RequestId) -> Result<usize, BackendError> {
        Ok(0)
    }

    fn release(&mut self, id: RequestId) -> Result<MemAction, BackendError> {
        let Some(t) = self.tables.remove(&id) else {
            return Ok(MemAction::default());
        };
        let before = t.blocks.len() * self.block_size_tokens;
        self.free_blocks.extend(t.blocks);
        Ok(MemAction { provisioned_before: before, ..Default::default() })
    }

    fn evict_cache(&mut self) -> Result<bool, BackendError> {
        Ok(false)
    }

    fn breakdown(&self) -> MemoryBreakdown {
        let in_use = self.used_blocks() as u64 * self.block_bytes();
        BreakdownParts {
            capacity: self.device.capacity_bytes,
            weights: self.device.weights_bytes,
            activation: self.activation(),
            kv_used: self.live_tokens() * self.bytes_per_token,
            kv_allocated: self.pool_bytes(),
            lookahead: 0,
            pinned: 0,
            retained: 0,
            other_reserved: self.pool_bytes() - in_use,
            active_requests: self.tables.len() as u64,
        }
        .into()
    }

    fn stats(&self) -> BackendStats {
        BackendStats {
            created_bytes: self.pool_bytes(),
            mapped_bytes: self.used_blocks() as u64 * self.block_bytes(),
            used_bytes: self.live_tokens() * self.bytes_per_token,
            reserved_virtual_bytes: 0,
            free_bytes: self.device.capacity_bytes - self.device.weights_bytes - self.activation() - self.pool_bytes(),
        }
    }

    fn finish_run(&mut self, _evict_prefix: bool) -> Result<Option<ReclaimReport>, BackendError> {
        Ok(None)
    }
}
