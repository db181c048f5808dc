//! Request scheduling and the two-lane step simulator.

mod backend;
mod config;
mod sim;
pub mod trace;

pub use backend::{
    Admission, AllocatorKind, BackendError, BackendStats, KvBackend, MemOpKind, VTensorBackend,
};
pub use config::SimConfig;
pub use sim::{
    run_trace, EngineStep, MemOp, RequestReport, RequestState, SimError, SimulationReport, Simulator,
    StepRecord, CSV_HEADER,
};
pub use trace::{Scenario, ScenarioParams, TraceError, TraceRecord};
