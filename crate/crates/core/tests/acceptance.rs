//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any fails.

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vtensor::check::{brute_force_match, default_check_config, fuzz};
use vtensor::device::{GIB, MIB};
use vtensor::par::par_map;
use vtensor::pool::RadixTree;
use vtensor::serve::trace::{generate, Scenario, ScenarioParams, TraceRecord};
use vtensor::serve::{run_trace, AllocatorKind, SimConfig, SimulationReport, Simulator};
use vtensor::{RecordId, RequestId, TokenId};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn scenario_cfg() -> SimConfig {
    SimConfig { max_seq_len: 16384, ..SimConfig::default() }
}

fn scenario(s: Scenario, requests: usize) -> Vec<TraceRecord> {
    let mut p = ScenarioParams::defaults(s, 1);
    p.requests = requests;
    generate(s, p)
}

fn run(trace: &[TraceRecord], cfg: &SimConfig, kind: AllocatorKind) -> Result<SimulationReport, String> {
    run_trace(trace, cfg, kind).map_err(|e| format!("{kind}: {e}"))
}

fn decoupling() -> Outcome {
    let reports = par_map(&(0..1000u64).collect::<Vec<_>>(), |&seed| fuzz(default_check_config(), seed, 60, 4));
    let mut ops = 0;
    for (seed, r) in reports.into_iter().enumerate() {
        let (_, rep) = r?;
        if let Some(v) = rep.violations.first() {
            return Err(format!("seed {seed}: {v}"));
        }
        ops += rep.ops_applied;
    }
    Ok(format!("1000 sequences, {ops} ops, 0 violations"))
}

fn refcount() -> Outcome {
    let reports = par_map(&(0..10u64).collect::<Vec<_>>(), |&seed| fuzz(default_check_config(), 1000 + seed, 1000, 4));
    let mut scans = 0;
    for r in reports {
        let (_, rep) = r?;
        if let Some(v) = rep.violations.first() {
            return Err(v.to_string());
        }
        scans += rep.scans;
    }
    ensure(scans == 10_000, format!("only {scans} scans"))?;
    Ok(format!("{scans} steps scanned, 0 violations"))
}

fn radix_workload(seed: u64) -> Result<usize, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tpc = if seed % 2 == 0 { 2 } else { 32 };
    let mut tree = RadixTree::new(tpc);
    let mut keys: BTreeSet<Vec<TokenId>> = BTreeSet::new();
    let mut list: Vec<Vec<TokenId>> = Vec::new();
    let mut queries = 0;
    let random_seq = |rng: &mut ChaCha8Rng, base: Option<&Vec<TokenId>>| -> Vec<TokenId> {
        let len = rng.gen_range(1..=512);
        let mut v: Vec<TokenId> = (0..len).map(|_| rng.gen_range(0..8)).collect();
        if let Some(b) = base {
            let keep = rng.gen_range(0..=b.len().min(len));
            v[..keep].copy_from_slice(&b[..keep]);
        }
        v
    };
    for _ in 0..rng.gen_range(5..40) {
        let base = if list.is_empty() || rng.gen_bool(0.3) { None } else { Some(list[rng.gen_range(0..list.len())].clone()) };
        if rng.gen_bool(0.4) {
            let mut k = random_seq(&mut rng, base.as_ref());
            k.truncate(k.len() - k.len() % tpc);
            if k.is_empty() {
                continue;
            }
            tree.insert(&k, RecordId(list.len() as u64));
            keys.insert(k.clone());
            list.push(k);
        } else {
            let q = random_seq(&mut rng, base.as_ref());
            queries += 1;
            let got = tree.match_prefix(&q).map(|(r, n)| (n, list[r.0 as usize].len()));
            let want = brute_force_match(&keys, &q, tpc);
            if got != want {
                return Err(format!("seed {seed}: tree {got:?} vs brute force {want:?}"));
            }
        }
    }
    Ok(queries)
}

fn radix() -> Outcome {
    let seeds: Vec<u64> = (0..2000).collect();
    let mut queries = 0;
    for r in par_map(&seeds, |&s| radix_workload(s)) {
        queries += r?;
    }
    Ok(format!("2000 workloads, {queries} queries, 100% agreement"))
}

fn prefix_frugality() -> Outcome {
    let trace = scenario(Scenario::PrefixShare, 8);
    let cfg = scenario_cfg();
    let mut sim = Simulator::new(&trace, cfg, cfg.vtensor().map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    let tpc = cfg.tokens_per_chunk();
    let expected = 4000usize.div_ceil(tpc) + cfg.lookahead_chunks;
    let mut checked = 0;
    while !sim.is_done() {
        let step = sim.step().map_err(|e| e.to_string())?;
        let vts = sim.backend().vts();
        for id in step.prefills.iter().filter(|id| id.0 > 0) {
            let rep = sim.request_report(*id).expect("known request");
            ensure(rep.matched_tokens == 12000, format!("{id} matched {}", rep.matched_tokens))?;
            ensure(
                rep.prefill_acquired_chunks == expected,
                format!("{id} acquired {} chunks, expected {expected}", rep.prefill_acquired_chunks),
            )?;
            ensure(rep.prefill_created_chunks <= expected, format!("{id} created {}", rep.prefill_created_chunks))?;
            let mine = vts.page_handles(*id);
            let donor = vts
                .manager()
                .records()
                .find(|r| r.donor == Some(RequestId(0)))
                .ok_or("no record from the first request")?;
            let shared: Vec<_> =
                vts.manager().space(donor.vt.space).expect("record space").mapped_handles().take(375).collect();
            ensure(mine[..375] == shared[..], format!("{id}: shared page table differs"))?;
            checked += 1;
        }
    }
    ensure(checked == 7, format!("{checked} sharing requests checked"))?;
    Ok(format!("7 requests x {expected} acquisitions, 375 shared chunks identical"))
}

fn native_formula() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let lens: Vec<usize> = (0..64).map(|_| rng.gen_range(513..=4096)).collect();
    let trace: Vec<TraceRecord> = lens
        .iter()
        .enumerate()
        .map(|(i, &l)| TraceRecord {
            id: i as u64,
            arrival_step: 0,
            conversation: None,
            prompt_len: 512,
            prompt_tokens: None,
            output_len: l - 511,
        })
        .collect();
    let cfg = SimConfig { max_seq_len: 4096, max_batch: 64, ..SimConfig::default() };
    let r = run(&trace, &cfg, AllocatorKind::Native)?;
    let mut at_1229 = None;
    for s in &r.steps {
        let k = s.step as usize;
        let live: Vec<usize> = trace.iter().filter(|t| k < t.output_len).map(|_| 512 + k).collect();
        let n = live.len() as u64;
        ensure(s.active_requests == n, format!("step {k}: {} active, model says {n}", s.active_requests))?;
        if n == 0 {
            continue;
        }
        let sum: u64 = live.iter().map(|&t| t as u64).sum();
        let exact = (n * 4096 - sum) as f64 / (n * 4096) as f64;
        let got = s.breakdown.fragmentation_ratio();
        ensure((got - exact).abs() <= 1e-12, format!("step {k}: ratio {got} vs {exact}"))?;
        let mean = sum as f64 / n as f64;
        if (1200.0..1229.0).contains(&mean) {
            at_1229 = Some((mean, got));
        }
    }
    let (mean, ratio) = at_1229.ok_or("no step with mean length near 1229")?;
    ensure(ratio > 0.70, format!("ratio {ratio} at mean length {mean}"))?;
    Ok(format!("{} steps exact to 1e-12; ratio {ratio:.4} at mean length {mean:.0}", r.steps.len()))
}

struct Runs {
    /// (label, kind, report)
    reports: Vec<(String, AllocatorKind, SimulationReport)>,
}

fn all_runs() -> Result<Runs, String> {
    let single = scenario(Scenario::SingleGen, 8);
    let multi = scenario(Scenario::MultiTurn, 4);
    let share = scenario(Scenario::PrefixShare, 8);
    let batch4 = SimConfig { max_batch: 4, ..scenario_cfg() };
    let mut tight = SimConfig { max_batch: 16, ..scenario_cfg() };
    tight.device.capacity_bytes = tight.device.weights_bytes + 4 * GIB;
    let single16 = scenario(Scenario::SingleGen, 16);
    let jobs: Vec<(String, Vec<TraceRecord>, SimConfig, AllocatorKind)> = [
        ("single_gen/batch4", &single, batch4),
        ("multi_turn", &multi, scenario_cfg()),
        ("prefix_share", &share, scenario_cfg()),
        ("single_gen/tight", &single16, tight),
    ]
    .into_iter()
    .flat_map(|(l, t, c)| AllocatorKind::ALL.map(|k| (l.to_string(), t.clone(), c, k)))
    .collect();
    let out = par_map(&jobs, |(l, t, c, k)| run(t, c, *k).map(|r| (l.clone(), *k, r)));
    Ok(Runs { reports: out.into_iter().collect::<Result<_, _>>()? })
}

impl Runs {
    fn get(&self, label: &str, kind: AllocatorKind) -> &SimulationReport {
        &self.reports.iter().find(|(l, k, _)| l == label && *k == kind).expect("run exists").2
    }
}

fn paged_exclusive(runs: &Runs) -> Outcome {
    let mut steps = 0;
    for (label, _, r) in runs.reports.iter().filter(|(_, k, _)| *k == AllocatorKind::Paged) {
        let pool = r.steps.first().map(|s| s.created_bytes).ok_or("empty run")?;
        for s in &r.steps {
            ensure(s.created_bytes == pool, format!("{label} step {}: footprint {} != {pool}", s.step, s.created_bytes))?;
            ensure(s.breakdown.kv_allocated == pool, format!("{label} step {}", s.step))?;
        }
        steps += r.steps.len();
    }
    Ok(format!("{steps} paged steps at constant pool size"))
}

fn flexibility(runs: &Runs) -> Outcome {
    let v = runs.get("single_gen/batch4", AllocatorKind::VTensor);
    let p = runs.get("single_gen/batch4", AllocatorKind::Paged);
    let (vf, pf) = (v.summary().mean_free_fraction, p.summary().mean_free_fraction);
    ensure(vf >= 0.60, format!("vtensor mean free fraction {vf}"))?;
    ensure(pf <= 0.05, format!("paged mean free fraction {pf}"))?;
    ensure(
        v.created_after_reclaim == v.pinned_after_reclaim && v.pinned_after_reclaim == 0,
        format!("after empty_memory: created {} pinned {}", v.created_after_reclaim, v.pinned_after_reclaim),
    )?;
    Ok(format!("vtensor free {vf:.3}, paged free {pf:.3}, created after reclaim 0"))
}

fn overlap(runs: &Runs) -> Outcome {
    for k in AllocatorKind::ALL {
        let r = runs.get("single_gen/batch4", k);
        ensure(r.stall_count == 0, format!("{k}: {} stalls with ample capacity", r.stall_count))?;
    }
    let tight = runs.get("single_gen/tight", AllocatorKind::VTensor);
    let cap = 4 * GIB;
    ensure(tight.preemption_count > 0, "reduced capacity never preempted")?;
    ensure(tight.requests.iter().all(|q| q.generated == q.output_len), "a request did not finish")?;
    for s in &tight.steps {
        ensure(s.created_bytes <= cap, format!("step {}: created {} > {cap}", s.step, s.created_bytes))?;
    }
    let mut cfg = SimConfig { max_batch: 16, ..scenario_cfg() };
    cfg.device.capacity_bytes = cfg.device.weights_bytes + cap;
    let again = run(&scenario(Scenario::SingleGen, 16), &cfg, AllocatorKind::VTensor)?;
    ensure(&again == tight, "reduced-capacity rerun differs")?;
    Ok(format!("0 stalls ample; {} preemptions at 4 GiB KV, completed, deterministic", tight.preemption_count))
}

fn quantization(runs: &Runs) -> Outcome {
    let cfg = scenario_cfg();
    let chunk = cfg.device.chunk_size_bytes;
    let mut steps = 0;
    for (label, _, r) in runs.reports.iter().filter(|(_, k, _)| *k == AllocatorKind::VTensor) {
        for s in &r.steps {
            let b = &s.breakdown;
            b.check().map_err(|e| format!("{label} step {}: {e}", s.step))?;
            let slack = b.kv_allocated - b.kv_used - b.retained - b.pinned;
            let bound = b.active_requests * (1 + cfg.lookahead_chunks as u64) * chunk;
            ensure(slack <= bound, format!("{label} step {}: {slack} > {bound}", s.step))?;
        }
        steps += r.steps.len();
    }
    Ok(format!("{steps} vtensor steps within bound"))
}

fn determinism(runs: &Runs) -> Outcome {
    let share = scenario(Scenario::PrefixShare, 8);
    let multi = scenario(Scenario::MultiTurn, 4);
    for k in AllocatorKind::ALL {
        for (label, t) in [("prefix_share", &share), ("multi_turn", &multi)] {
            let again = run(t, &scenario_cfg(), k)?.to_csv();
            ensure(again == runs.get(label, k).to_csv(), format!("{label}/{k}: CSV differs"))?;
        }
    }
    Ok("repeat runs produce identical CSV".into())
}

fn main() -> ExitCode {
    let mut failed = 0;
    let mut report = |n: usize, name: &str, f: &dyn Fn() -> Outcome| {
        let r = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or(p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        match r {
            Ok(detail) => println!("PASS  {n:>2} {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {n:>2} {name}: {detail}");
            }
        }
    };
    report(1, "decoupling and lazy deallocation", &decoupling);
    report(2, "refcount and hard-link scan", &refcount);
    report(3, "radix tree vs brute force", &radix);
    report(4, "prefix-sharing frugality", &prefix_frugality);
    report(5, "native fragmentation formula", &native_formula);
    match all_runs() {
        Ok(runs) => {
            report(6, "paged exclusivity", &|| paged_exclusive(&runs));
            report(7, "vtensor memory flexibility", &|| flexibility(&runs));
            report(8, "overlap and stall freedom", &|| overlap(&runs));
            report(9, "quantization bound", &|| quantization(&runs));
            report(10, "determinism", &|| determinism(&runs));
        }
        Err(e) => {
            for (n, name) in [(6, "paged exclusivity"), (7, "vtensor memory flexibility"), (8, "overlap and stall freedom"), (9, "quantization bound"), (10, "determinism")] {
                report(n, name, &|| Err(format!("scenario runs failed: {e}")));
            }
        }
    }
    let _ = MIB;
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
