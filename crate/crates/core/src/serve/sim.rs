//! Deterministic step simulator with a compute lane and a memory lane.
//!
//! Synchronous memory work (release, prefix record, admission) finishes
//! before a step's compute starts. Decode extends are issued asynchronously
//! after it; a step stalls only when a decoding request needs a token slot
//! whose extend has not completed by the time compute could start.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;
use thiserror::Error;

use crate::metrics::{flexibility_summary, FlexibilitySummary, MemoryBreakdown};
use crate::ops::ReclaimReport;
use crate::types::{RequestId, TokenId};
use crate::vts::MemAction;

use super::backend::{AllocatorKind, BackendError, KvBackend, MemOpKind};
use super::config::SimConfig;
use super::trace::{output_token, synth_prompt, validate, TraceRecord};

pub const CSV_HEADER: &str =
    "step,created_bytes,mapped_bytes,used_bytes,reserved_virtual_bytes,free_bytes,active_requests,stalls,preemptions";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum RequestState {
    Queued,
    Prefilling,
    Decoding,
    Preempted,
    Finished,
    Released,
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("trace infeasible at {request}: {reason}")]
    TraceInfeasible { request: RequestId, reason: String },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("trace record {index}: {msg}")]
    InvalidTrace { index: usize, msg: String },
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("trace did not complete within {0} steps")]
    StepLimit(u64),
}

/// One memory action placed on the memory lane.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct MemOp {
    pub request: RequestId,
    pub kind: MemOpKind,
    pub device_calls: usize,
    pub issued_at: u64,
    pub ready_at: u64,
    pub sync: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EngineStep {
    pub step_index: u64,
    pub batch: Vec<RequestId>,
    /// Requests in `batch` running their prefill this step.
    pub prefills: Vec<RequestId>,
    pub compute_start: u64,
    pub compute_time: u64,
    pub memory_ops: Vec<MemOp>,
    pub stall: bool,
    pub preempted: Vec<RequestId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct StepRecord {
    pub step: u64,
    pub created_bytes: u64,
    pub mapped_bytes: u64,
    pub used_bytes: u64,
    pub reserved_virtual_bytes: u64,
    pub free_bytes: u64,
    pub active_requests: u64,
    pub stalls: u32,
    pub preemptions: u32,
    pub batch_size: usize,
    pub compute_time: u64,
    /// Compute-lane time from the previous step's end to this step's end.
    pub latency: u64,
    pub breakdown: MemoryBreakdown,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RequestReport {
    pub id: RequestId,
    pub arrival_step: u64,
    pub conversation: Option<u64>,
    /// Full prompt length, history included.
    pub prompt_len: usize,
    pub output_len: usize,
    pub generated: usize,
    pub matched_tokens: usize,
    /// Chunks or blocks taken at the last admission.
    pub prefill_acquired_chunks: usize,
    pub prefill_created_chunks: usize,
    pub prefill_device_calls: usize,
    pub admitted_step: Option<u64>,
    pub finished_step: Option<u64>,
    pub preemptions: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimulationReport {
    pub allocator: AllocatorKind,
    pub steps: Vec<StepRecord>,
    pub requests: Vec<RequestReport>,
    pub stall_count: usize,
    pub preemption_count: usize,
    pub total_time: u64,
    pub end_reclaim: Option<ReclaimReport>,
    pub created_after_reclaim: u64,
    pub pinned_after_reclaim: u64,
}

impl SimulationReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(CSV_HEADER);
        s.push('\n');
        for r in &self.steps {
            writeln!(
                s,
                "{},{},{},{},{},{},{},{},{}",
                r.step,
                r.created_bytes,
                r.mapped_bytes,
                r.used_bytes,
                r.reserved_virtual_bytes,
                r.free_bytes,
                r.active_requests,
                r.stalls,
                r.preemptions
            )
            .expect("writing to a String");
        }
        s
    }

    pub fn breakdowns(&self) -> Vec<MemoryBreakdown> {
        self.steps.iter().map(|r| r.breakdown).collect()
    }

    pub fn summary(&self) -> FlexibilitySummary {
        flexibility_summary(&self.breakdowns(), self.stall_count, self.preemption_count)
    }
}

#[derive(Debug, Clone)]
struct Req {
    rec: TraceRecord,
    id: RequestId,
    state: RequestState,
    prompt: Option<Vec<TokenId>>,
    generated: usize,
    /// (provisioned tokens, memory-lane time they become usable)
    segments: Vec<(usize, u64)>,
    /// Earlier turn whose history this request's prompt starts with.
    gate: Option<usize>,
    /// A later request continues this conversation.
    continues: bool,
    report: RequestReport,
}

impl Req {
    fn tokens(&self) -> usize {
        self.prompt.as_ref().map_or(0, Vec::len) + self.generated.saturating_sub(1)
    }

    fn ready_for(&self, need: usize) -> Option<u64> {
        self.segments.iter().find(|(upto, _)| *upto >= need).map(|(_, t)| *t)
    }
}

struct Pending {
    idx: usize,
    kind: MemOpKind,
    action: MemAction,
}

pub struct Simulator<B> {
    cfg: SimConfig,
    backend: B,
    reqs: Vec<Req>,
    /// Request indices by priority, highest first.
    order: Vec<usize>,
    history: BTreeMap<u64, Vec<TokenId>>,
    step: u64,
    compute_free: u64,
    mem_free: u64,
    records: Vec<StepRecord>,
    stalls: usize,
    preemptions: usize,
    released: usize,
}

impl<B: KvBackend> Simulator<B> {
    pub fn new(trace: &[TraceRecord], cfg: SimConfig, backend: B) -> Result<Self, SimError> {
        cfg.validate().map_err(SimError::InvalidConfig)?;
        validate(trace).map_err(|(index, msg)| SimError::InvalidTrace { index, msg })?;
        let mut last_turn: BTreeMap<u64, usize> = BTreeMap::new();
        let mut reqs: Vec<Req> = Vec::with_capacity(trace.len());
        for (i, rec) in trace.iter().enumerate() {
            let mut gate = None;
            if let Some(c) = rec.conversation {
                if let Some(prev) = last_turn.insert(c, i) {
                    reqs[prev].continues = true;
                    if rec.prompt_tokens.is_none() {
                        gate = Some(prev);
                    }
                }
            }
            let id = RequestId(rec.id);
            reqs.push(Req {
                rec: rec.clone(),
                id,
                state: RequestState::Queued,
                prompt: None,
                generated: 0,
                segments: Vec::new(),
                gate,
                continues: false,
                report: RequestReport {
                    id,
                    arrival_step: rec.arrival_step,
                    conversation: rec.conversation,
                    prompt_len: rec.prompt_len,
                    output_len: rec.output_len,
                    generated: 0,
                    matched_tokens: 0,
                    prefill_acquired_chunks: 0,
                    prefill_created_chunks: 0,
                    prefill_device_calls: 0,
                    admitted_step: None,
                    finished_step: None,
                    preemptions: 0,
                },
            });
        }
        let mut order: Vec<usize> = (0..reqs.len()).collect();
        order.sort_by_key(|&i| (reqs[i].rec.arrival_step, i));
        Ok(Self {
            cfg,
            backend,
            reqs,
            order,
            history: BTreeMap::new(),
            step: 0,
            compute_free: 0,
            mem_free: 0,
            records: Vec::new(),
            stalls: 0,
            preemptions: 0,
            released: 0,
        })
    }

    pub fn backend(&self) -> &B {
        &self.backend
    }

    pub fn config(&self) -> &SimConfig {
        &self.cfg
    }

    /// Index of the next step to run.
    pub fn step_index(&self) -> u64 {
        self.step
    }

    pub fn is_done(&self) -> bool {
        self.released == self.reqs.len()
    }

    pub fn records(&self) -> &[StepRecord] {
        &self.records
    }

    pub fn request_state(&self, id: RequestId) -> Option<RequestState> {
        self.reqs.iter().find(|r| r.id == id).map(|r| r.state)
    }

    pub fn request_report(&self, id: RequestId) -> Option<&RequestReport> {
        self.reqs.iter().find(|r| r.id == id).map(|r| &r.report)
    }

    fn infeasible(&self, idx: usize, reason: impl Into<String>) -> SimError {
        SimError::TraceInfeasible { request: self.reqs[idx].id, reason: reason.into() }
    }

    fn eligible(&self, idx: usize) -> bool {
        let r = &self.reqs[idx];
        r.state == RequestState::Queued
            && r.rec.arrival_step <= self.step
            && r.gate.map_or(true, |g| self.reqs[g].state == RequestState::Released)
    }

    fn materialize_prompt(&mut self, idx: usize) {
        if self.reqs[idx].prompt.is_some() {
            return;
        }
        let r = &self.reqs[idx];
        let prompt = match &r.rec.prompt_tokens {
            Some(t) => t.clone(),
            None => {
                let mut p = r.rec.conversation.and_then(|c| self.history.get(&c).cloned()).unwrap_or_default();
                p.extend(synth_prompt(self.cfg.seed, r.rec.id, r.rec.prompt_len));
                p
            }
        };
        let r = &mut self.reqs[idx];
        r.report.prompt_len = prompt.len();
        r.prompt = Some(prompt);
    }

    fn preempt(&mut self, idx: usize) -> Result<MemAction, SimError> {
        let action = self.backend.release(self.reqs[idx].id)?;
        let r = &mut self.reqs[idx];
        r.state = RequestState::Preempted;
        r.generated = 0;
        r.segments.clear();
        r.report.preemptions += 1;
        r.state = RequestState::Queued;
        self.preemptions += 1;
        Ok(action)
    }

    fn lowest_priority_decoding(&self) -> Option<usize> {
        self.order.iter().rev().copied().find(|&i| self.reqs[i].state == RequestState::Decoding)
    }

    /// Runs one scheduling step and its compute.
    pub fn step(&mut self) -> Result<EngineStep, SimError> {
        if self.step >= self.cfg.max_steps {
            return Err(SimError::StepLimit(self.cfg.max_steps));
        }
        let now = self.compute_free;
        let mut sync: Vec<Pending> = Vec::new();
        let mut asynch: Vec<Pending> = Vec::new();
        let mut preempted = Vec::new();

        // finished requests: offer the prefix, keep history, release
        for pos in 0..self.order.len() {
            let i = self.order[pos];
            if self.reqs[i].state != RequestState::Finished {
                continue;
            }
            let id = self.reqs[i].id;
            if self.reqs[i].continues {
                let calls = self.backend.record_prefix(id)?;
                let action = MemAction { device_calls: calls, ..Default::default() };
                sync.push(Pending { idx: i, kind: MemOpKind::PrefixRecord, action });
            }
            let r = &self.reqs[i];
            if let Some(c) = r.rec.conversation {
                let mut h = r.prompt.clone().unwrap_or_default();
                h.extend((0..r.rec.output_len).map(|p| output_token(self.cfg.seed, r.rec.id, p)));
                self.history.insert(c, h);
            }
            let action = self.backend.release(id)?;
            sync.push(Pending { idx: i, kind: MemOpKind::Release, action });
            self.reqs[i].state = RequestState::Released;
            self.released += 1;
        }

        // decode extends, highest priority first
        let decoding: Vec<usize> =
            self.order.iter().copied().filter(|&i| self.reqs[i].state == RequestState::Decoding).collect();
        for &i in &decoding {
            if self.reqs[i].state != RequestState::Decoding {
                continue;
            }
            loop {
                match self.backend.decode_extend(self.reqs[i].id) {
                    Ok(action) => {
                        asynch.push(Pending { idx: i, kind: MemOpKind::Extend, action });
                        break;
                    }
                    Err(BackendError::OutOfMemory(msg)) => {
                        if self.backend.evict_cache()? {
                            continue;
                        }
                        let victim = self.lowest_priority_decoding().expect("requester is decoding");
                        let active = self.reqs.iter().filter(|r| r.state == RequestState::Decoding).count();
                        if victim == i && active == 1 {
                            return Err(self.infeasible(i, format!("nothing to preempt: {msg}")));
                        }
                        let action = self.preempt(victim)?;
                        sync.push(Pending { idx: victim, kind: MemOpKind::Release, action });
                        preempted.push(self.reqs[victim].id);
                        if victim == i {
                            break;
                        }
                    }
                    Err(e) => return Err(e.into()),
                }
            }
        }
        let decode_batch: Vec<usize> =
            decoding.into_iter().filter(|&i| self.reqs[i].state == RequestState::Decoding).collect();

        // admissions in priority order, blocked at the head
        let mut admitted: Vec<usize> = Vec::new();
        while decode_batch.len() + admitted.len() < self.cfg.max_batch {
            let Some(i) = self.order.iter().copied().find(|&i| self.eligible(i)) else { break };
            self.materialize_prompt(i);
            let r = &self.reqs[i];
            let prompt = r.prompt.as_ref().expect("materialized");
            if prompt.len() + r.rec.output_len - 1 > self.cfg.max_seq_len {
                return Err(self.infeasible(
                    i,
                    format!(
                        "{} prompt + {} output tokens exceed max_seq_len {}",
                        prompt.len(),
                        r.rec.output_len,
                        self.cfg.max_seq_len
                    ),
                ));
            }
            let try_prefix = r.rec.conversation.is_some();
            match self.backend.admit(r.id, prompt, try_prefix) {
                Ok(adm) => {
                    let r = &mut self.reqs[i];
                    r.state = RequestState::Prefilling;
                    r.report.matched_tokens = adm.matched_tokens;
                    r.report.prefill_acquired_chunks = adm.acquired_chunks();
                    r.report.prefill_created_chunks = adm.created_chunks();
                    r.report.prefill_device_calls = adm.device_calls();
                    r.report.admitted_step = Some(self.step);
                    for (kind, action) in adm.actions {
                        sync.push(Pending { idx: i, kind, action });
                    }
                    admitted.push(i);
                }
                Err(BackendError::OutOfMemory(msg)) => {
                    if self.backend.evict_cache()? {
                        continue;
                    }
                    if decode_batch.is_empty() && admitted.is_empty() {
                        return Err(self.infeasible(i, msg));
                    }
                    break;
                }
                Err(e) => return Err(self.infeasible(i, e.to_string())),
            }
        }

        // memory lane: synchronous work, then the asynchronous extends
        let cost = self.cfg.mem_op_cost;
        let mut t = self.mem_free.max(now);
        let mut memory_ops = Vec::with_capacity(sync.len() + asynch.len());
        let mut barrier = t;
        for (is_sync, list) in [(true, sync), (false, asynch)] {
            for p in list {
                let issued = t;
                t += p.action.device_calls as u64 * cost;
                if p.action.provisioned_after > p.action.provisioned_before {
                    self.reqs[p.idx].segments.push((p.action.provisioned_after, t));
                }
                memory_ops.push(MemOp {
                    request: self.reqs[p.idx].id,
                    kind: p.kind,
                    device_calls: p.action.device_calls,
                    issued_at: issued,
                    ready_at: t,
                    sync: is_sync,
                });
            }
            if is_sync {
                barrier = t;
            }
        }
        self.mem_free = t;

        // compute
        let earliest = now.max(barrier);
        let mut start = earliest;
        for &i in &decode_batch {
            let r = &self.reqs[i];
            let ready = r
                .ready_for(r.tokens() + 1)
                .ok_or_else(|| BackendError::Internal(format!("{} decodes past its provisioned memory", r.id)))?;
            start = start.max(ready);
        }
        let stall = start > earliest;
        let prefill_tokens: u64 = admitted
            .iter()
            .map(|&i| {
                let r = &self.reqs[i];
                (r.report.prompt_len - r.report.matched_tokens) as u64
            })
            .sum();
        let compute_time = prefill_tokens * self.cfg.prefill_cost_per_token
            + decode_batch.len() as u64 * self.cfg.decode_cost_per_request;
        self.compute_free = start + compute_time;

        // effects
        for &i in &decode_batch {
            let (id, pos) = (self.reqs[i].id, self.reqs[i].generated - 1);
            let token = output_token(self.cfg.seed, self.reqs[i].rec.id, pos);
            self.backend.commit(id, &[token])?;
            let r = &mut self.reqs[i];
            r.generated += 1;
            if r.generated == r.rec.output_len {
                r.state = RequestState::Finished;
                r.report.finished_step = Some(self.step);
            }
        }
        for &i in &admitted {
            let r = &mut self.reqs[i];
            r.generated = 1;
            r.state = RequestState::Decoding;
            if r.rec.output_len == 1 {
                r.state = RequestState::Finished;
                r.report.finished_step = Some(self.step);
            }
        }
        for r in &mut self.reqs {
            r.report.generated = r.generated;
        }
        if stall {
            self.stalls += 1;
        }

        let stats = self.backend.stats();
        let breakdown = self.backend.breakdown();
        self.records.push(StepRecord {
            step: self.step,
            created_bytes: stats.created_bytes,
            mapped_bytes: stats.mapped_bytes,
            used_bytes: stats.used_bytes,
            reserved_virtual_bytes: stats.reserved_virtual_bytes,
            free_bytes: stats.free_bytes,
            active_requests: breakdown.active_requests,
            stalls: stall as u32,
            preemptions: preempted.len() as u32,
            batch_size: decode_batch.len() + admitted.len(),
            compute_time,
            latency: self.compute_free - now,
            breakdown,
        });

        let prefills: Vec<RequestId> = admitted.iter().map(|&i| self.reqs[i].id).collect();
        let mut batch: Vec<RequestId> = decode_batch.iter().map(|&i| self.reqs[i].id).collect();
        batch.extend(&prefills);
        let out = EngineStep {
            step_index: self.step,
            batch,
            prefills,
            compute_start: start,
            compute_time,
            memory_ops,
            stall,
            preempted,
        };
        self.step += 1;
        Ok(out)
    }

    /// Empties memory at end of run and assembles the report.
    pub fn finish(mut self) -> Result<SimulationReport, SimError> {
        let end_reclaim = self.backend.finish_run(self.cfg.evict_prefix_at_end)?;
        let after = self.backend.breakdown();
        Ok(SimulationReport {
            allocator: self.backend.kind(),
            steps: self.records,
            requests: self.reqs.into_iter().map(|r| r.report).collect(),
            stall_count: self.stalls,
            preemption_count: self.preemptions,
            total_time: self.compute_free,
            end_reclaim,
            created_after_reclaim: after.kv_allocated,
            pinned_after_reclaim: after.pinned,
        })
    }

    pub fn run(mut self) -> Result<SimulationReport, SimError> {
        while !self.is_done() {
            self.step()?;
        }
        self.finish()
    }
}

/// Replays a trace against one allocator.
pub fn run_trace(trace: &[TraceRecord], cfg: &SimConfig, kind: AllocatorKind) -> Result<SimulationReport, SimError> {
    cfg.validate().map_err(SimError::InvalidConfig)?;
    match kind {
        AllocatorKind::Native => Simulator::new(trace, *cfg, cfg.native())?.run(),
        AllocatorKind::Paged => Simulator::new(trace, *cfg, cfg.paged()?)?.run(),
        AllocatorKind::VTensor => Simulator::new(trace, *cfg, cfg.vtensor()?)?.run(),
    }
}
