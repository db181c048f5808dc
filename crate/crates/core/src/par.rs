//! Data-parallel helpers for independent simulation runs. With the
//! `parallel` feature off, everything runs sequentially in input order.

use crate::serve::{run_trace, AllocatorKind, SimConfig, SimError, SimulationReport, TraceRecord};

#[cfg(feature = "parallel")]
pub fn par_map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    use rayon::prelude::*;
    items.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn par_map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    seq_map(items, f)
}

pub fn seq_map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    F: Fn(&T) -> R,
{
    items.iter().map(f).collect()
}

/// Replays one trace against every allocator.
pub fn compare_allocators(
    trace: &[TraceRecord],
    cfg: &SimConfig,
) -> Vec<(AllocatorKind, Result<SimulationReport, SimError>)> {
    par_map(&AllocatorKind::ALL, |&k| (k, run_trace(trace, cfg, k)))
}

/// Replays one trace under each configuration.
pub fn sweep(
    trace: &[TraceRecord],
    cfgs: &[SimConfig],
    kind: AllocatorKind,
) -> Vec<Result<SimulationReport, SimError>> {
    par_map(cfgs, |c| run_trace(trace, c, kind))
}
