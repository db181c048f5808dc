use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use vtensor::check::{check_log, default_check_config, fuzz, op_log_to_jsonl, parse_op_log, CheckReport};
use vtensor::metrics::FlexibilitySummary;
use vtensor::ops::ReclaimReport;
use vtensor::par::compare_allocators;
use vtensor::serve::trace::{generate, parse_trace, to_jsonl, Scenario, ScenarioParams};
use vtensor::serve::{run_trace, AllocatorKind, SimError, SimulationReport};

mod config;
mod units;

use config::SimArgs;
use units::format_bytes;

#[derive(Parser)]
#[command(name = "vtsim", version, about = "KV-cache allocator simulator")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Replay a JSONL trace and write per-step CSV and JSON summaries
    Replay(ReplayArgs),
    /// Emit a synthetic trace
    GenTrace(GenArgs),
    /// Run the invariant oracles over an op log or a fuzzed op sequence
    Check(CheckArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum AllocatorArg {
    Native,
    Paged,
    Vtensor,
    All,
}

#[derive(clap::Args)]
struct ReplayArgs {
    #[arg(long)]
    trace: PathBuf,
    #[arg(long, value_enum, default_value = "vtensor", env = "VTSIM_ALLOCATOR")]
    allocator: AllocatorArg,
    /// Directory for <allocator>.csv and <allocator>.summary.json
    #[arg(long, default_value = ".", env = "VTSIM_OUT_DIR")]
    out_dir: PathBuf,
    #[command(flatten)]
    sim: SimArgs,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScenarioArg {
    #[value(name = "single_gen")]
    SingleGen,
    #[value(name = "multi_turn")]
    MultiTurn,
    #[value(name = "prefix_share")]
    PrefixShare,
}

#[derive(clap::Args)]
struct GenArgs {
    #[arg(long, value_enum)]
    scenario: ScenarioArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Requests, or conversations for multi_turn
    #[arg(long)]
    requests: Option<usize>,
    /// Turns per conversation (multi_turn)
    #[arg(long)]
    turns: Option<usize>,
    /// Output file; stdout when absent
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(clap::Args)]
struct CheckArgs {
    /// JSONL op log to replay
    #[arg(long, conflicts_with = "fuzz")]
    log: Option<PathBuf>,
    /// Generate a random valid op sequence instead
    #[arg(long)]
    fuzz: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1000)]
    steps: usize,
    /// Token alphabet size for fuzzed prefixes
    #[arg(long, default_value_t = 4)]
    alphabet: u32,
    /// Write the fuzzed op log here
    #[arg(long)]
    emit_log: Option<PathBuf>,
    #[arg(long)]
    tokens_per_chunk: Option<usize>,
    /// Device size in chunks
    #[arg(long)]
    chunks: Option<u64>,
}

#[derive(Serialize)]
struct SummaryFile<'a> {
    allocator: AllocatorKind,
    steps: usize,
    requests: usize,
    total_time: u64,
    summary: FlexibilitySummary,
    end_reclaim: Option<&'a ReclaimReport>,
    created_after_reclaim: u64,
    pinned_after_reclaim: u64,
}

fn write_report(dir: &std::path::Path, r: &SimulationReport) -> Result<()> {
    let csv = dir.join(format!("{}.csv", r.allocator));
    std::fs::write(&csv, r.to_csv()).with_context(|| format!("writing {}", csv.display()))?;
    let summary = SummaryFile {
        allocator: r.allocator,
        steps: r.steps.len(),
        requests: r.requests.len(),
        total_time: r.total_time,
        summary: r.summary(),
        end_reclaim: r.end_reclaim.as_ref(),
        created_after_reclaim: r.created_after_reclaim,
        pinned_after_reclaim: r.pinned_after_reclaim,
    };
    let json = dir.join(format!("{}.summary.json", r.allocator));
    std::fs::write(&json, serde_json::to_string_pretty(&summary)? + "\n")
        .with_context(|| format!("writing {}", json.display()))?;
    Ok(())
}

fn print_table(reports: &[&SimulationReport]) {
    println!(
        "{:<8} {:>8} {:>10} {:>12} {:>8} {:>11} {:>12}",
        "alloc", "steps", "mean_free", "peak_kv", "stalls", "preemptions", "time"
    );
    for r in reports {
        let s = r.summary();
        println!(
            "{:<8} {:>8} {:>10.4} {:>12} {:>8} {:>11} {:>12}",
            r.allocator.name(),
            s.steps,
            s.mean_free_fraction,
            format_bytes(s.peak_kv_allocated),
            s.stall_count,
            s.preemption_count,
            r.total_time
        );
    }
}

/// Exit status for a trace that cannot run on the configured device.
const EXIT_INFEASIBLE: u8 = 2;

fn replay(a: ReplayArgs) -> Result<ExitCode> {
    let cfg = a.sim.resolve()?;
    let text = std::fs::read_to_string(&a.trace).with_context(|| format!("reading {}", a.trace.display()))?;
    let trace = parse_trace(&text).with_context(|| format!("bad trace {}", a.trace.display()))?;
    std::fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;

    let results = match a.allocator {
        AllocatorArg::All => compare_allocators(&trace, &cfg),
        one => {
            let kind = match one {
                AllocatorArg::Native => AllocatorKind::Native,
                AllocatorArg::Paged => AllocatorKind::Paged,
                _ => AllocatorKind::VTensor,
            };
            vec![(kind, run_trace(&trace, &cfg, kind))]
        }
    };
    let mut done = Vec::new();
    let mut status = ExitCode::SUCCESS;
    for (kind, r) in &results {
        match r {
            Ok(rep) => {
                write_report(&a.out_dir, rep)?;
                done.push(rep);
            }
            Err(e @ SimError::TraceInfeasible { .. }) => {
                eprintln!("{kind}: {e}");
                status = ExitCode::from(EXIT_INFEASIBLE);
            }
            Err(e) => return Err(anyhow::anyhow!("{kind}: {e}")),
        }
    }
    print_table(&done);
    Ok(status)
}

fn gen_trace(a: GenArgs) -> Result<ExitCode> {
    let scenario = match a.scenario {
        ScenarioArg::SingleGen => Scenario::SingleGen,
        ScenarioArg::MultiTurn => Scenario::MultiTurn,
        ScenarioArg::PrefixShare => Scenario::PrefixShare,
    };
    let mut p = ScenarioParams::defaults(scenario, a.seed);
    if let Some(n) = a.requests {
        p.requests = n;
    }
    if let Some(t) = a.turns {
        p.turns = t;
    }
    let text = to_jsonl(&generate(scenario, p));
    match a.out {
        Some(path) => std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?,
        None => print!("{text}"),
    }
    Ok(ExitCode::SUCCESS)
}

fn check(a: CheckArgs) -> Result<ExitCode> {
    let mut cfg = default_check_config();
    if let Some(t) = a.tokens_per_chunk {
        cfg.tokens_per_chunk = t;
        cfg.max_seq_len = 16 * t;
    }
    if let Some(n) = a.chunks {
        cfg.device.capacity_bytes = n * cfg.device.chunk_size_bytes;
    }
    let report: CheckReport = if let Some(path) = &a.log {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let ops = parse_op_log(&text).map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))?;
        check_log(cfg, &ops).map_err(anyhow::Error::msg)?
    } else if a.fuzz {
        let (log, report) = fuzz(cfg, a.seed, a.steps, a.alphabet).map_err(anyhow::Error::msg)?;
        if let Some(p) = &a.emit_log {
            std::fs::write(p, op_log_to_jsonl(&log)).with_context(|| format!("writing {}", p.display()))?;
        }
        report
    } else {
        anyhow::bail!("give --log <file> or --fuzz");
    };
    println!(
        "ops {} scans {} match queries {} hits {}",
        report.ops_applied, report.scans, report.match_queries, report.match_hits
    );
    if let Some(v) = report.violations.first() {
        println!("violation: {v}");
        return Ok(ExitCode::FAILURE);
    }
    println!("ok");
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let r = match cli.cmd {
        Command::Replay(a) => replay(a),
        Command::GenTrace(a) => gen_trace(a),
        Command::Check(a) => check(a),
    };
    r.unwrap_or_else(|e| {
        eprintln!("error: {e:#}");
        ExitCode::FAILURE
    })
}
