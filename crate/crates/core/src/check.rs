//! Replayable manager op logs and the oracle suite run against them:
//! refcount scans, free-state consistency, byte conservation, the
//! virtual/physical decoupling rules, and a brute-force prefix matcher.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::device::{DeviceCall, DeviceConfig, PhysicalHandle, MIB};
use crate::ops::{ManagerConfig, VTensorManager};
use crate::pool::{ChunkState, SpaceId, SpaceOwner, SpaceState, VTensor};
use crate::types::{align_down, RequestId, TokenId};

/// One manager call. Spaces and chunks are named by the order in which the
/// log obtained them: `space: 2` is the third `v_alloc` result, `chunk: 5`
/// the sixth handle returned by any `p_alloc`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum ManagerOp {
    VAlloc,
    PAlloc { n: usize },
    Map { space: usize, chunks: Vec<usize> },
    Unmap { space: usize },
    VFree { space: usize },
    PFree { chunk: usize },
    EmptyMemory {
        #[serde(default)]
        evict_prefix: bool,
    },
    RPush { space: usize, tokens: Vec<TokenId> },
    RMatch { tokens: Vec<TokenId> },
}

impl ManagerOp {
    pub fn name(&self) -> &'static str {
        match self {
            ManagerOp::VAlloc => "v_alloc",
            ManagerOp::PAlloc { .. } => "p_alloc",
            ManagerOp::Map { .. } => "map",
            ManagerOp::Unmap { .. } => "unmap",
            ManagerOp::VFree { .. } => "v_free",
            ManagerOp::PFree { .. } => "p_free",
            ManagerOp::EmptyMemory { .. } => "empty_memory",
            ManagerOp::RPush { .. } => "r_push",
            ManagerOp::RMatch { .. } => "r_match",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Oracle {
    /// The manager refused the op.
    Rejected,
    Refcount,
    FreeState,
    Conservation,
    Decoupling,
    PageTable,
    Radix,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub op_index: usize,
    pub op: String,
    pub oracle: Oracle,
    pub detail: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "op {} ({}): {:?}: {}", self.op_index, self.op, self.oracle, self.detail)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckReport {
    pub ops_applied: usize,
    pub scans: usize,
    pub match_queries: usize,
    pub match_hits: usize,
    pub violations: Vec<Violation>,
}

impl CheckReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Small device used by op-log checks: 256 chunks, 4 tokens per chunk,
/// 16-page spaces.
pub fn default_check_config() -> ManagerConfig {
    ManagerConfig {
        device: DeviceConfig {
            capacity_bytes: 256 * 2 * MIB,
            chunk_size_bytes: 2 * MIB,
            weights_bytes: 0,
            activation_bytes_per_request: 0,
        },
        tokens_per_chunk: 4,
        max_seq_len: 64,
        prefix_cache_max_chunks: None,
    }
}

/// Longest chunk-aligned common prefix of `query` with any key, and the
/// shortest key length among keys covering it.
pub fn brute_force_match(keys: &BTreeSet<Vec<TokenId>>, query: &[TokenId], tpc: usize) -> Option<(usize, usize)> {
    let lcp = |k: &Vec<TokenId>| k.iter().zip(query).take_while(|(a, b)| a == b).count();
    let best = keys.iter().map(lcp).max().map(|n| align_down(n, tpc))?;
    if best == 0 {
        return None;
    }
    let shortest = keys.iter().filter(|k| lcp(k) >= best).map(Vec::len).min()?;
    Some((best, shortest))
}

/// Applies ops to a manager and runs every oracle after each one.
pub struct Checker {
    mgr: VTensorManager,
    spaces: Vec<SpaceId>,
    chunks: Vec<PhysicalHandle>,
    /// Recorded keys, tracked independently of the radix tree.
    keys: BTreeSet<Vec<TokenId>>,
    report: CheckReport,
}

impl Checker {
    pub fn new(cfg: ManagerConfig) -> Result<Self, String> {
        let mut mgr = VTensorManager::new(cfg).map_err(|e| e.to_string())?;
        mgr.device_mut().set_logging(true);
        Ok(Self { mgr, spaces: Vec::new(), chunks: Vec::new(), keys: BTreeSet::new(), report: CheckReport::default() })
    }

    pub fn manager(&self) -> &VTensorManager {
        &self.mgr
    }

    pub fn report(&self) -> &CheckReport {
        &self.report
    }

    pub fn into_report(self) -> CheckReport {
        self.report
    }

    fn space(&self, i: usize) -> Result<SpaceId, String> {
        self.spaces.get(i).copied().ok_or_else(|| format!("space index {i} was never allocated"))
    }

    fn chunk(&self, i: usize) -> Result<PhysicalHandle, String> {
        self.chunks.get(i).copied().ok_or_else(|| format!("chunk index {i} was never allocated"))
    }

    /// Applies one op. Returns the first violation it causes.
    pub fn apply(&mut self, op: &ManagerOp) -> Result<(), Violation> {
        let index = self.report.ops_applied;
        let fail = |oracle, detail: String| Violation { op_index: index, op: op.name().into(), oracle, detail };
        self.mgr.device_mut().clear_log();
        let created_before = self.mgr.device().created_bytes();

        self.exec(op).map_err(|d| fail(Oracle::Rejected, d))?;
        self.report.ops_applied += 1;

        let calls: Vec<DeviceCall> = self.mgr.device().call_log().to_vec();
        self.decoupling(op, &calls, created_before).map_err(|d| fail(Oracle::Decoupling, d))?;
        self.scan().map_err(|(o, d)| fail(o, d))?;
        self.report.scans += 1;
        Ok(())
    }

    fn exec(&mut self, op: &ManagerOp) -> Result<(), String> {
        let e = |e: crate::ops::OpsError| e.to_string();
        match op {
            ManagerOp::VAlloc => {
                let owner = SpaceOwner::Request(RequestId(self.spaces.len() as u64));
                let max = self.mgr.config().max_seq_len;
                let id = self.mgr.v_alloc(max, owner).map_err(e)?;
                self.spaces.push(id);
            }
            ManagerOp::PAlloc { n } => {
                let hs = self.mgr.p_alloc(*n).map_err(e)?;
                self.chunks.extend(hs);
            }
            ManagerOp::Map { space, chunks } => {
                let s = self.space(*space)?;
                let hs = chunks.iter().map(|&c| self.chunk(c)).collect::<Result<Vec<_>, _>>()?;
                self.mgr.map(s, &hs).map_err(e)?;
            }
            ManagerOp::Unmap { space } => {
                let s = self.space(*space)?;
                self.mgr.unmap_space(s).map_err(e)?;
            }
            ManagerOp::VFree { space } => {
                let s = self.space(*space)?;
                self.mgr.v_free(s).map_err(e)?;
            }
            ManagerOp::PFree { chunk } => {
                let h = self.chunk(*chunk)?;
                self.mgr.p_free(h).map_err(e)?;
            }
            ManagerOp::EmptyMemory { evict_prefix } => {
                self.mgr.empty_memory(*evict_prefix).map_err(e)?;
                if *evict_prefix {
                    self.keys.clear();
                }
            }
            ManagerOp::RPush { space, tokens } => {
                let s = self.space(*space)?;
                let vt = VTensor {
                    space: s,
                    token_count: tokens.len(),
                    capacity_tokens: self.mgr.space_pages() * self.mgr.tokens_per_chunk(),
                    tokens: tokens.clone(),
                    owner: None,
                };
                if self.mgr.r_push(&vt).map_err(e)?.is_some() {
                    self.keys.insert(tokens[..align_down(tokens.len(), self.mgr.tokens_per_chunk())].to_vec());
                }
            }
            ManagerOp::RMatch { tokens } => {
                let got = self.mgr.r_prefix_match(tokens);
                let want = brute_force_match(&self.keys, tokens, self.mgr.tokens_per_chunk());
                self.report.match_queries += 1;
                match (got, want) {
                    (None, None) => {}
                    (Some((rec, len)), Some((best, shortest))) => {
                        let key = &self.mgr.record(rec).ok_or("matched record is not registered")?.vt.tokens;
                        if len != best || key.len() != shortest || key[..len] != tokens[..len] {
                            return Err(format!(
                                "radix oracle: tree matched {len} tokens via a {}-token key, brute force {best} via {shortest}",
                                key.len()
                            ));
                        }
                        self.report.match_hits += 1;
                    }
                    (g, w) => return Err(format!("radix oracle: tree {:?}, brute force {:?}", g.map(|x| x.1), w)),
                }
            }
        }
        Ok(())
    }

    fn decoupling(&self, op: &ManagerOp, calls: &[DeviceCall], created_before: u64) -> Result<(), String> {
        let creates = calls.iter().filter(|c| c.is_create()).count();
        let destroys = calls.iter().filter(|c| c.is_destroy()).count();
        let maps = calls.iter().filter(|c| matches!(c, DeviceCall::Map { .. })).count();
        let is_palloc = matches!(op, ManagerOp::PAlloc { .. });
        if creates > 0 && !is_palloc {
            return Err(format!("{creates} create call(s) outside p_alloc"));
        }
        if self.mgr.device().created_bytes() > created_before && !is_palloc {
            return Err("created_bytes grew outside p_alloc".into());
        }
        if destroys > 0 && !matches!(op, ManagerOp::PFree { .. } | ManagerOp::EmptyMemory { .. }) {
            return Err(format!("{destroys} destroy call(s) from {}", op.name()));
        }
        if matches!(op, ManagerOp::VAlloc | ManagerOp::PAlloc { .. }) && maps > 0 {
            return Err(format!("{} mapped {maps} page(s)", op.name()));
        }
        if matches!(op, ManagerOp::RMatch { .. }) && !calls.is_empty() {
            return Err("a prefix lookup touched the device".into());
        }
        Ok(())
    }

    /// Exhaustive state scan.
    pub fn scan(&self) -> Result<(), (Oracle, String)> {
        let mgr = &self.mgr;
        let dev = mgr.device();
        let mut table_refs: BTreeMap<PhysicalHandle, usize> = BTreeMap::new();
        for s in mgr.vset().iter() {
            let slots = dev.slots(&s.range).ok_or((Oracle::PageTable, format!("{} has no device range", s.id)))?;
            if slots != s.page_table.as_slice() {
                return Err((Oracle::PageTable, format!("{} page table disagrees with the device", s.id)));
            }
            if s.page_table.iter().take_while(|p| p.is_some()).count() != s.mapped
                || s.page_table[s.mapped..].iter().any(Option::is_some)
            {
                return Err((Oracle::PageTable, format!("{} mapped pages are not a prefix", s.id)));
            }
            if s.state == SpaceState::Available && s.mapped > 0 {
                return Err((Oracle::PageTable, format!("available {} still maps {} page(s)", s.id, s.mapped)));
            }
            for h in s.mapped_handles() {
                *table_refs.entry(h).or_default() += 1;
            }
        }
        for e in mgr.pset().iter() {
            let rc = e.ref_count();
            let mc = dev.map_count(e.handle).ok_or((Oracle::Refcount, format!("{} is not live on the device", e.handle)))?;
            let tc = table_refs.get(&e.handle).copied().unwrap_or(0);
            let referrers_mapping = e
                .referrers
                .iter()
                .filter(|s| mgr.space(**s).is_some_and(|v| v.mapped_handles().any(|h| h == e.handle)))
                .count();
            if rc != mc || rc != tc || referrers_mapping != rc {
                return Err((
                    Oracle::Refcount,
                    format!("{}: ref_count {rc}, device map_count {mc}, page-table refs {tc}, referrers mapping it {referrers_mapping}", e.handle),
                ));
            }
            match e.state {
                ChunkState::Free if rc != 0 => return Err((Oracle::FreeState, format!("free {} has {rc} referrer(s)", e.handle))),
                ChunkState::Active if rc == 0 => return Err((Oracle::FreeState, format!("{} unreferenced but not free", e.handle))),
                ChunkState::Pending if rc != 0 => return Err((Oracle::FreeState, format!("pending {} is mapped", e.handle))),
                _ => {}
            }
        }
        if table_refs.keys().any(|h| mgr.pset().get(*h).is_none()) {
            return Err((Oracle::Refcount, "a page table maps a handle unknown to the pSet".into()));
        }
        let cfg = dev.config();
        let created = dev.created_bytes();
        if created != mgr.pset().len() as u64 * cfg.chunk_size_bytes {
            return Err((Oracle::Conservation, format!("created_bytes {created} != {} pSet entries", mgr.pset().len())));
        }
        let total = created + dev.free_bytes() + cfg.weights_bytes + dev.activation_bytes();
        if total != cfg.capacity_bytes {
            return Err((Oracle::Conservation, format!("created + free + weights + activation = {total}, capacity {}", cfg.capacity_bytes)));
        }
        Ok(())
    }
}

/// Replays a log, stopping at the first violation.
pub fn check_log(cfg: ManagerConfig, ops: &[ManagerOp]) -> Result<CheckReport, String> {
    let mut c = Checker::new(cfg)?;
    for op in ops {
        if let Err(v) = c.apply(op) {
            c.report.violations.push(v);
            break;
        }
    }
    Ok(c.into_report())
}

pub fn parse_op_log(text: &str) -> Result<Vec<ManagerOp>, String> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| format!("line {}: {e}", i + 1)))
        .collect()
}

pub fn op_log_to_jsonl(ops: &[ManagerOp]) -> String {
    ops.iter().map(|o| serde_json::to_string(o).expect("ops serialize") + "\n").collect()
}

/// Generates and applies `steps` valid ops from `seed`. Tokens come from a
/// small alphabet so recorded prefixes overlap.
pub fn fuzz(cfg: ManagerConfig, seed: u64, steps: usize, alphabet: u32) -> Result<(Vec<ManagerOp>, CheckReport), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut c = Checker::new(cfg)?;
    let mut log = Vec::with_capacity(steps);
    let tpc = cfg.tokens_per_chunk;
    for _ in 0..steps {
        let op = next_op(&c, &mut rng, tpc, alphabet.max(1));
        let r = c.apply(&op);
        log.push(op);
        if let Err(v) = r {
            c.report.violations.push(v);
            break;
        }
    }
    Ok((log, c.into_report()))
}

fn next_op(c: &Checker, rng: &mut ChaCha8Rng, tpc: usize, alphabet: u32) -> ManagerOp {
    let mgr = &c.mgr;
    // an index is live while the space still carries the owner it was allocated with
    let state = |i: usize| mgr.space(c.spaces[i]).map(|s| (s.state, s.owner));
    let in_use: Vec<usize> = (0..c.spaces.len())
        .filter(|&i| state(i) == Some((SpaceState::InUse, Some(SpaceOwner::Request(RequestId(i as u64))))))
        .collect();
    let available: Vec<usize> =
        (0..c.spaces.len()).filter(|&i| matches!(state(i), Some((SpaceState::Available, _)))).collect();
    let chunk_idx = |state: ChunkState| -> Vec<usize> {
        let mut seen = BTreeSet::new();
        (0..c.chunks.len())
            .filter(|&i| mgr.pset().get(c.chunks[i]).is_some_and(|e| e.state == state) && seen.insert(c.chunks[i]))
            .collect()
    };
    let pending = chunk_idx(ChunkState::Pending);
    let free = chunk_idx(ChunkState::Free);
    let active = chunk_idx(ChunkState::Active);
    let dev_free = mgr.device().free_bytes() / mgr.config().device.chunk_size_bytes;
    fn tokens(rng: &mut ChaCha8Rng, max_len: usize, alphabet: u32) -> Vec<TokenId> {
        let len = rng.gen_range(1..=max_len.max(1));
        (0..len).map(|_| rng.gen_range(0..alphabet)).collect()
    }

    loop {
        match rng.gen_range(0..100) {
            0..=11 if in_use.len() < 24 => return ManagerOp::VAlloc,
            12..=25 => {
                let n = rng.gen_range(1..=4usize);
                if (n as u64) <= dev_free + free.len() as u64 {
                    return ManagerOp::PAlloc { n };
                }
            }
            26..=45 if !in_use.is_empty() && (!pending.is_empty() || !active.is_empty()) => {
                let s = in_use[rng.gen_range(0..in_use.len())];
                let space = mgr.space(c.spaces[s]).expect("in use");
                let room = space.remaining_pages();
                if room == 0 {
                    continue;
                }
                // pending chunks first, sometimes share an active one
                let mut pool: Vec<usize> = pending.clone();
                if rng.gen_bool(0.3) {
                    pool.extend(active.iter().copied());
                }
                let mut pick: Vec<usize> = Vec::new();
                let want = rng.gen_range(1..=3usize).min(room);
                for &i in &pool {
                    if pick.len() == want {
                        break;
                    }
                    let e = mgr.pset().get(c.chunks[i]).expect("live");
                    if !e.referrers.contains(&c.spaces[s]) && !pick.iter().any(|&p| c.chunks[p] == c.chunks[i]) {
                        pick.push(i);
                    }
                }
                if !pick.is_empty() {
                    return ManagerOp::Map { space: s, chunks: pick };
                }
            }
            46..=57 if !in_use.is_empty() => {
                return ManagerOp::Unmap { space: in_use[rng.gen_range(0..in_use.len())] };
            }
            58..=62 if !available.is_empty() => {
                return ManagerOp::VFree { space: available[rng.gen_range(0..available.len())] };
            }
            63..=67 if !free.is_empty() => {
                return ManagerOp::PFree { chunk: free[rng.gen_range(0..free.len())] };
            }
            68..=70 => return ManagerOp::EmptyMemory { evict_prefix: rng.gen_bool(0.3) },
            71..=84 => {
                let mapped: Vec<usize> =
                    in_use.iter().copied().filter(|&i| mgr.space(c.spaces[i]).is_some_and(|s| s.mapped > 0)).collect();
                if !mapped.is_empty() {
                    let s = mapped[rng.gen_range(0..mapped.len())];
                    let pages = mgr.space(c.spaces[s]).expect("in use").mapped;
                    let mut t = tokens(rng, pages * tpc, alphabet);
                    // reuse an existing key's start half the time
                    if rng.gen_bool(0.5) && !c.keys.is_empty() {
                        let k = c.keys.iter().nth(rng.gen_range(0..c.keys.len())).expect("nonempty");
                        let keep = rng.gen_range(0..=k.len().min(t.len()));
                        t[..keep].copy_from_slice(&k[..keep]);
                    }
                    return ManagerOp::RPush { space: s, tokens: t };
                }
            }
            85..=99 => {
                let mut t = tokens(rng, 16 * tpc, alphabet);
                if rng.gen_bool(0.6) && !c.keys.is_empty() {
                    let k = c.keys.iter().nth(rng.gen_range(0..c.keys.len())).expect("nonempty");
                    let keep = rng.gen_range(0..=k.len().min(t.len()));
                    t[..keep].copy_from_slice(&k[..keep]);
                }
                return ManagerOp::RMatch { tokens: t };
            }
            _ => {}
        }
    }
}
