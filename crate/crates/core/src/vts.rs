//! Request-level memory actions on top of the vTensor manager: Create,
//! Extend, Prefix Record, Prefix Match and Release.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::device::PhysicalHandle;
use crate::metrics::{BreakdownParts, MemoryBreakdown};
use crate::ops::{ManagerConfig, OpsError, ReclaimReport, VTensorManager};
use crate::pool::{ChunkState, SpaceId, SpaceOwner, VTensor};
use crate::types::{align_down, div_ceil, RecordId, RequestId, TokenId};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum VtsError {
    #[error(transparent)]
    Ops(#[from] OpsError),
    #[error("{0} already has memory")]
    AlreadyCreated(RequestId),
    #[error("{0} has no memory")]
    UnknownRequest(RequestId),
    #[error("{requested} tokens exceed the maximum sequence length {max}")]
    ExceedsMaxSeqLen { requested: usize, max: usize },
    #[error("{request} holds {provisioned} provisioned tokens, cannot store {needed}")]
    CapacityExceeded { request: RequestId, provisioned: usize, needed: usize },
}

impl VtsError {
    pub fn is_out_of_memory(&self) -> bool {
        matches!(self, VtsError::Ops(e) if e.is_out_of_memory())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VtsConfig {
    pub manager: ManagerConfig,
    /// Tokens provisioned at Create even for shorter prompts.
    pub initial_alloc_tokens: usize,
    /// Whole chunks kept mapped ahead of the token count.
    pub lookahead_chunks: usize,
}

/// Memory held by one request.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RequestMem {
    pub request: RequestId,
    pub vt: VTensor,
    pub mapped_pages: usize,
    pub tokens_per_chunk: usize,
    /// Chunk-aligned tokens mapped from a prefix record.
    pub shared_prefix_tokens: usize,
    /// Chunks obtained through `p_alloc` over the request's lifetime.
    pub acquired_chunks: usize,
    /// Of those, chunks the device had to create.
    pub created_chunks: usize,
}

impl RequestMem {
    pub fn provisioned_tokens(&self) -> usize {
        self.mapped_pages * self.tokens_per_chunk
    }
}

/// Device work performed by one action.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemAction {
    /// Primitive device calls issued.
    pub device_calls: usize,
    pub acquired_chunks: usize,
    pub created_chunks: usize,
    pub provisioned_before: usize,
    pub provisioned_after: usize,
}

impl MemAction {
    fn merge(self, later: MemAction) -> MemAction {
        MemAction {
            device_calls: self.device_calls + later.device_calls,
            acquired_chunks: self.acquired_chunks + later.acquired_chunks,
            created_chunks: self.created_chunks + later.created_chunks,
            provisioned_before: self.provisioned_before,
            provisioned_after: later.provisioned_after,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Vts {
    cfg: VtsConfig,
    mgr: VTensorManager,
    mems: BTreeMap<RequestId, RequestMem>,
}

impl Vts {
    pub fn new(cfg: VtsConfig) -> Result<Self, VtsError> {
        Ok(Self { mgr: VTensorManager::new(cfg.manager)?, cfg, mems: BTreeMap::new() })
    }

    pub fn config(&self) -> &VtsConfig {
        &self.cfg
    }

    pub fn manager(&self) -> &VTensorManager {
        &self.mgr
    }

    pub fn manager_mut(&mut self) -> &mut VTensorManager {
        &mut self.mgr
    }

    pub fn mem(&self, id: RequestId) -> Option<&RequestMem> {
        self.mems.get(&id)
    }

    pub fn mems(&self) -> impl Iterator<Item = &RequestMem> {
        self.mems.values()
    }

    fn tpc(&self) -> usize {
        self.cfg.manager.tokens_per_chunk
    }

    fn max_seq(&self) -> usize {
        self.cfg.manager.max_seq_len
    }

    fn check_len(&self, n: usize) -> Result<(), VtsError> {
        if n > self.max_seq() {
            return Err(VtsError::ExceedsMaxSeqLen { requested: n, max: self.max_seq() });
        }
        Ok(())
    }

    fn calls(&self) -> usize {
        self.mgr.device().call_count()
    }

    /// Acquires `n` chunks and appends them to `space`.
    fn grow_space(&mut self, space: SpaceId, n: usize) -> Result<(usize, usize), VtsError> {
        let created_before = self.mgr.device().stats().live_chunks;
        let chunks = self.mgr.p_alloc(n)?;
        let created = self.mgr.device().stats().live_chunks - created_before;
        if let Err(e) = self.mgr.map(space, &chunks) {
            for h in chunks {
                self.mgr.p_return(h)?;
            }
            return Err(e.into());
        }
        Ok((n, created))
    }

    /// Chunks needed to hold the prompt, at least `initial_alloc_tokens`.
    fn initial_pages(&self, prompt_len: usize) -> usize {
        let tokens = prompt_len.max(self.cfg.initial_alloc_tokens);
        div_ceil(tokens, self.tpc()).min(self.mgr.space_pages())
    }

    /// Reserves a max-length virtual space and maps enough chunks for the prompt.
    pub fn create(&mut self, request: RequestId, prompt: &[TokenId]) -> Result<MemAction, VtsError> {
        if self.mems.contains_key(&request) {
            return Err(VtsError::AlreadyCreated(request));
        }
        self.check_len(prompt.len())?;
        let mark = self.calls();
        let space = self.mgr.v_alloc(self.max_seq(), SpaceOwner::Request(request))?;
        let pages = self.initial_pages(prompt.len());
        let (acquired, created) = match self.grow_space(space, pages) {
            Ok(r) => r,
            Err(e) => {
                self.mgr.unmap_space(space)?;
                return Err(e);
            }
        };
        self.install(request, space, prompt, pages, 0, acquired, created);
        Ok(MemAction {
            device_calls: self.calls() - mark,
            acquired_chunks: acquired,
            created_chunks: created,
            provisioned_before: 0,
            provisioned_after: pages * self.tpc(),
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn install(
        &mut self,
        request: RequestId,
        space: SpaceId,
        prompt: &[TokenId],
        pages: usize,
        shared: usize,
        acquired: usize,
        created: usize,
    ) {
        let tpc = self.tpc();
        let mem = RequestMem {
            request,
            vt: VTensor {
                space,
                token_count: prompt.len(),
                capacity_tokens: self.mgr.space_pages() * tpc,
                tokens: prompt.to_vec(),
                owner: Some(request),
            },
            mapped_pages: pages,
            tokens_per_chunk: tpc,
            shared_prefix_tokens: shared,
            acquired_chunks: acquired,
            created_chunks: created,
        };
        self.mems.insert(request, mem);
    }

    /// Ensures at least `target_tokens` are provisioned, mapping whole chunks.
    pub fn extend(&mut self, request: RequestId, target_tokens: usize) -> Result<MemAction, VtsError> {
        self.check_len(target_tokens)?;
        let tpc = self.tpc();
        let mem = self.mems.get(&request).ok_or(VtsError::UnknownRequest(request))?;
        let before = mem.provisioned_tokens();
        let space = mem.vt.space;
        if target_tokens <= before {
            return Ok(MemAction { provisioned_before: before, provisioned_after: before, ..Default::default() });
        }
        let pages = div_ceil(target_tokens, tpc) - mem.mapped_pages;
        let mark = self.calls();
        let (acquired, created) = self.grow_space(space, pages)?;
        let mem = self.mems.get_mut(&request).expect("checked above");
        mem.mapped_pages += pages;
        mem.acquired_chunks += acquired;
        mem.created_chunks += created;
        let after = mem.provisioned_tokens();
        Ok(MemAction {
            device_calls: self.calls() - mark,
            acquired_chunks: acquired,
            created_chunks: created,
            provisioned_before: before,
            provisioned_after: after,
        })
    }

    /// The two extends issued at prefill: cover the prompt, then pre-extend
    /// `lookahead_chunks` whole chunks past it (capped at the space size).
    pub fn prefill_extend(&mut self, request: RequestId) -> Result<MemAction, VtsError> {
        let [cover, pre] = self.prefill_extends(request)?;
        Ok(cover.merge(pre))
    }

    /// `prefill_extend` with the two extends reported separately.
    pub fn prefill_extends(&mut self, request: RequestId) -> Result<[MemAction; 2], VtsError> {
        let t = self.mems.get(&request).ok_or(VtsError::UnknownRequest(request))?.vt.token_count;
        let cover = self.extend(request, t)?;
        let ahead = self.lookahead_target(t);
        let pre = self.extend(request, ahead)?;
        Ok([cover, pre])
    }

    /// Extend before a decode step: room for the token this step writes plus
    /// the lookahead chunks.
    pub fn decode_extend(&mut self, request: RequestId) -> Result<MemAction, VtsError> {
        let t = self.mems.get(&request).ok_or(VtsError::UnknownRequest(request))?.vt.token_count;
        self.check_len(t + 1)?;
        let target = self.lookahead_target(t + 1).max(t + 1);
        self.extend(request, target)
    }

    fn lookahead_target(&self, tokens: usize) -> usize {
        let cap = self.mgr.space_pages() * self.tpc();
        (tokens + self.cfg.lookahead_chunks * self.tpc()).min(cap).min(self.max_seq().max(tokens))
    }

    /// Appends generated tokens whose KV has been written.
    pub fn commit_tokens(&mut self, request: RequestId, tokens: &[TokenId]) -> Result<(), VtsError> {
        let mem = self.mems.get_mut(&request).ok_or(VtsError::UnknownRequest(request))?;
        let needed = mem.vt.token_count + tokens.len();
        if needed > mem.provisioned_tokens() {
            return Err(VtsError::CapacityExceeded {
                request,
                provisioned: mem.provisioned_tokens(),
                needed,
            });
        }
        mem.vt.tokens.extend_from_slice(tokens);
        mem.vt.token_count = needed;
        Ok(())
    }

    /// Records the request's chunk-aligned tokens as a prefix candidate.
    pub fn prefix_record(&mut self, request: RequestId) -> Result<Option<RecordId>, VtsError> {
        let mem = self.mems.get(&request).ok_or(VtsError::UnknownRequest(request))?;
        let vt = mem.vt.clone();
        Ok(self.mgr.r_push(&vt)?)
    }

    /// Tries to start `request` from a recorded prefix. On a hit the matched
    /// chunks are mapped (same handles, no copies) into a fresh space and the
    /// rest of the prompt is provisioned as Create would. Returns the matched
    /// token count; 0 means a miss and no state change.
    pub fn prefix_match(
        &mut self,
        request: RequestId,
        prompt: &[TokenId],
    ) -> Result<(usize, MemAction), VtsError> {
        if self.mems.contains_key(&request) {
            return Err(VtsError::AlreadyCreated(request));
        }
        self.check_len(prompt.len())?;
        let Some((record, matched)) = self.mgr.r_prefix_match(prompt) else {
            return Ok((0, MemAction::default()));
        };
        let tpc = self.tpc();
        let shared_pages = matched / tpc;
        let rec_space = self.mgr.record(record).expect("matched record exists").vt.space;
        let shared: Vec<PhysicalHandle> = self
            .mgr
            .space(rec_space)
            .expect("record space exists")
            .mapped_handles()
            .take(shared_pages)
            .collect();

        let mark = self.calls();
        let space = self.mgr.v_alloc(self.max_seq(), SpaceOwner::Request(request))?;
        let total_pages = self.initial_pages(prompt.len()).max(shared_pages);
        let result = self
            .mgr
            .map(space, &shared)
            .map_err(VtsError::from)
            .and_then(|_| self.grow_space(space, total_pages - shared_pages));
        let (acquired, created) = match result {
            Ok(r) => r,
            Err(e) => {
                self.mgr.unmap_space(space)?;
                return Err(e);
            }
        };
        self.install(request, space, prompt, total_pages, matched, acquired, created);
        Ok((
            matched,
            MemAction {
                device_calls: self.calls() - mark,
                acquired_chunks: acquired,
                created_chunks: created,
                provisioned_before: 0,
                provisioned_after: total_pages * tpc,
            },
        ))
    }

    /// Returns the request's space and chunks to the pools. Lazy: nothing is
    /// destroyed. Releasing an unknown request is a no-op.
    pub fn release(&mut self, request: RequestId) -> Result<MemAction, VtsError> {
        let Some(mem) = self.mems.remove(&request) else {
            return Ok(MemAction::default());
        };
        let mark = self.calls();
        self.mgr.unmap_space(mem.vt.space)?;
        Ok(MemAction {
            device_calls: self.calls() - mark,
            provisioned_before: mem.provisioned_tokens(),
            ..Default::default()
        })
    }

    pub fn empty_memory(&mut self, evict_prefix: bool) -> Result<ReclaimReport, VtsError> {
        Ok(self.mgr.empty_memory(evict_prefix)?)
    }

    /// Handles of the leading `pages` page-table entries of a request's space.
    pub fn page_handles(&self, request: RequestId) -> Vec<PhysicalHandle> {
        self.mems
            .get(&request)
            .and_then(|m| self.mgr.space(m.vt.space))
            .map(|s| s.mapped_handles().collect())
            .unwrap_or_default()
    }

    /// Memory categories at this instant. Shared chunks are counted once,
    /// with the highest fill any live referrer gives them.
    pub fn breakdown(&self, bytes_per_token: u64) -> MemoryBreakdown {
        let tpc = self.tpc();
        let chunk = self.cfg.manager.device.chunk_size_bytes;
        let mut fill: BTreeMap<PhysicalHandle, usize> = BTreeMap::new();
        for mem in self.mems.values() {
            let space = self.mgr.space(mem.vt.space).expect("request space exists");
            for (page, h) in space.mapped_handles().enumerate() {
                let in_page = mem.vt.token_count.saturating_sub(page * tpc).min(tpc);
                let e = fill.entry(h).or_insert(0);
                *e = (*e).max(in_page);
            }
        }
        let used_tokens: usize = fill.values().sum();
        let empty_chunks = fill.values().filter(|&&f| f == 0).count() as u64;
        let pending = self.mgr.pset().iter().filter(|e| e.state == ChunkState::Pending).count() as u64;
        let dev = self.mgr.device();
        BreakdownParts {
            capacity: dev.config().capacity_bytes,
            weights: dev.config().weights_bytes,
            activation: dev.activation_bytes(),
            kv_used: used_tokens as u64 * bytes_per_token,
            kv_allocated: dev.created_bytes(),
            lookahead: (empty_chunks + pending) * chunk,
            pinned: self.mgr.pinned_bytes(),
            retained: self.mgr.retained_bytes(),
            other_reserved: 0,
            active_requests: self.mems.len() as u64,
        }
        .into()
    }

    /// Chunk-aligned length of a token count.
    pub fn aligned(&self, tokens: usize) -> usize {
        align_down(tokens, self.tpc())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::device::{DeviceConfig, GIB, MIB};

    fn vts(max_seq: usize) -> Vts {
        Vts::new(VtsConfig {
            manager: ManagerConfig {
                device: DeviceConfig {
                    capacity_bytes: 8 * GIB,
                    chunk_size_bytes: 2 * MIB,
                    weights_bytes: 0,
                    activation_bytes_per_request: 0,
                },
                tokens_per_chunk: 32,
                max_seq_len: max_seq,
                prefix_cache_max_chunks: None,
            },
            initial_alloc_tokens: 256,
            lookahead_chunks: 1,
        })
        .unwrap()
    }

    fn toks(n: usize, salt: u32) -> Vec<TokenId> {
        (0..n as u32).map(|i| i.wrapping_mul(2654435761).wrapping_add(salt)).collect()
    }

    const R1: RequestId = RequestId(1);
    const R2: RequestId = RequestId(2);

    #[test]
    fn create_provisions_initial_tokens() {
        let mut v = vts(4096);
        let a = v.create(R1, &toks(100, 0)).unwrap();
        let mem = v.mem(R1).unwrap();
        assert_eq!(v.manager().space(mem.vt.space).unwrap().page_count(), 128);
        assert_eq!(mem.mapped_pages, 8);
        assert_eq!(a.acquired_chunks, 8);
        assert_eq!(mem.provisioned_tokens(), 256);
        assert_eq!(v.create(R1, &[]), Err(VtsError::AlreadyCreated(R1)));
    }

    #[test]
    fn create_empty_prompt_and_long_prompt() {
        let mut v = vts(4096);
        v.create(R1, &[]).unwrap();
        assert_eq!(v.mem(R1).unwrap().mapped_pages, 8);
        v.create(R2, &toks(300, 1)).unwrap();
        assert_eq!(v.mem(R2).unwrap().mapped_pages, 10);
    }

    #[test]
    fn extend_by_whole_chunks() {
        let mut v = vts(4096);
        v.create(R1, &toks(100, 0)).unwrap();
        let mark = v.manager().device().call_count();
        let noop = v.extend(R1, 200).unwrap();
        assert_eq!(noop.device_calls, 0);
        assert_eq!(v.manager().device().call_count(), mark);
        let a = v.extend(R1, 257).unwrap();
        assert_eq!(a.acquired_chunks, 1);
        assert_eq!(v.mem(R1).unwrap().provisioned_tokens(), 288);
        assert!(matches!(v.extend(R1, 4097), Err(VtsError::ExceedsMaxSeqLen { .. })));
        assert!(matches!(v.extend(R2, 1), Err(VtsError::UnknownRequest(_))));
    }

    #[test]
    fn prefill_pre_extends_one_chunk() {
        let mut v = vts(16384);
        v.create(R1, &toks(16000, 0)).unwrap();
        let a = v.prefill_extend(R1).unwrap();
        assert_eq!(a.acquired_chunks, 1);
        assert_eq!(v.mem(R1).unwrap().mapped_pages, 501);
        // short prompt: initial allocation already covers the lookahead
        v.create(R2, &toks(100, 1)).unwrap();
        assert_eq!(v.prefill_extend(R2).unwrap().acquired_chunks, 0);
    }

    #[test]
    fn decode_keeps_capacity_ahead() {
        let mut v = vts(4096);
        v.create(R1, &toks(256, 0)).unwrap();
        v.prefill_extend(R1).unwrap();
        for i in 0..100u32 {
            v.decode_extend(R1).unwrap();
            let m = v.mem(R1).unwrap();
            assert!(m.provisioned_tokens() >= m.vt.token_count + 1);
            v.commit_tokens(R1, &[i]).unwrap();
        }
        let m = v.mem(R1).unwrap();
        assert_eq!(m.vt.token_count, 356);
        assert!(m.provisioned_tokens() - m.vt.token_count <= 2 * 32);
    }

    #[test]
    fn commit_beyond_provisioned_fails() {
        let mut v = vts(4096);
        v.create(R1, &toks(256, 0)).unwrap();
        assert!(matches!(v.commit_tokens(R1, &[1]), Err(VtsError::CapacityExceeded { .. })));
    }

    #[test]
    fn record_aligns_down() {
        let mut v = vts(4096);
        v.create(R1, &toks(3990, 0)).unwrap();
        let rid = v.prefix_record(R1).unwrap().unwrap();
        let rec = v.manager().record(rid).unwrap();
        assert_eq!(rec.vt.token_count, 3968);
        assert_eq!(rec.pages, 124);
        // twice replaces
        let again = v.prefix_record(R1).unwrap().unwrap();
        assert!(v.manager().record(rid).is_none());
        assert_eq!(v.manager().rtree().len(), 1);
        assert!(v.manager().record(again).is_some());
        // less than a chunk
        v.create(R2, &toks(31, 9)).unwrap();
        assert_eq!(v.prefix_record(R2).unwrap(), None);
    }

    #[test]
    fn match_shares_chunks_by_identity() {
        let mut v = vts(16384);
        let prefix = toks(12000, 0);
        let mut p1 = prefix.clone();
        p1.extend(toks(4000, 100));
        v.create(R1, &p1).unwrap();
        v.prefix_record(R1).unwrap();
        let donor: Vec<_> = v.page_handles(R1)[..375].to_vec();
        v.release(R1).unwrap();

        let mut p2 = prefix.clone();
        p2.extend(toks(4000, 200));
        let mark = v.manager().device().call_count();
        let (matched, a) = v.prefix_match(R2, &p2).unwrap();
        assert_eq!(matched, 12000);
        assert_eq!(a.acquired_chunks, 125);
        assert_eq!(&v.page_handles(R2)[..375], &donor[..]);
        // shared pages were mapped, never created
        let log = &v.manager().device().call_log()[mark..];
        let created: Vec<_> = log
            .iter()
            .filter_map(|c| match c {
                crate::device::DeviceCall::Create { handle } => Some(*handle),
                _ => None,
            })
            .collect();
        assert!(created.iter().all(|h| !donor.contains(h)));
        assert_eq!(v.mem(R2).unwrap().shared_prefix_tokens, 12000);
    }

    #[test]
    fn match_miss_changes_nothing() {
        let mut v = vts(4096);
        let mark = v.manager().device().call_count();
        assert_eq!(v.prefix_match(R1, &toks(100, 0)).unwrap().0, 0);
        assert!(v.mem(R1).is_none());
        assert_eq!(v.manager().device().call_count(), mark);
    }

    #[test]
    fn release_is_lazy_and_reused() {
        let mut v = vts(4096);
        v.create(R1, &toks(300, 0)).unwrap();
        let space = v.mem(R1).unwrap().vt.space;
        let created = v.manager().device().created_bytes();
        v.release(R1).unwrap();
        assert_eq!(v.manager().device().created_bytes(), created);
        let mark = v.manager().device().call_count();
        v.create(R2, &toks(300, 1)).unwrap();
        assert_eq!(v.mem(R2).unwrap().vt.space, space);
        assert!(v.manager().device().call_log()[mark..].iter().all(|c| !c.is_create()));
        assert_eq!(v.release(R1).unwrap(), MemAction::default());
    }

    #[test]
    fn releasing_borrower_keeps_record() {
        let mut v = vts(4096);
        let p = toks(640, 0);
        v.create(R1, &p).unwrap();
        let rid = v.prefix_record(R1).unwrap().unwrap();
        v.release(R1).unwrap();
        v.prefix_match(R2, &p).unwrap();
        v.release(R2).unwrap();
        let rec = v.manager().record(rid).unwrap();
        let space = v.manager().space(rec.vt.space).unwrap();
        assert_eq!(space.mapped, 20);
        for h in space.mapped_handles() {
            assert_eq!(v.manager().pset().get(h).unwrap().ref_count(), 1);
        }
    }

    #[test]
    fn failed_create_leaves_no_trace() {
        let mut v = Vts::new(VtsConfig {
            manager: ManagerConfig {
                device: DeviceConfig {
                    capacity_bytes: 8 * MIB,
                    chunk_size_bytes: 2 * MIB,
                    weights_bytes: 0,
                    activation_bytes_per_request: 0,
                },
                tokens_per_chunk: 32,
                max_seq_len: 4096,
                prefix_cache_max_chunks: None,
            },
            initial_alloc_tokens: 32,
            lookahead_chunks: 1,
        })
        .unwrap();
        let err = v.create(R1, &toks(200, 0)).unwrap_err();
        assert!(err.is_out_of_memory());
        assert!(v.mem(R1).is_none());
        assert_eq!(v.manager().device().created_bytes(), 0);
    }

    #[test]
    fn breakdown_sums_to_capacity() {
        let mut v = vts(4096);
        v.create(R1, &toks(100, 0)).unwrap();
        let b = v.breakdown(65536);
        b.check().unwrap();
        assert_eq!(b.kv_used, 100 * 65536);
        assert_eq!(b.kv_allocated, 8 * 2 * MIB);
        assert_eq!(b.lookahead, 4 * 2 * MIB);
    }
}
