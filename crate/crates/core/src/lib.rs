//! Virtual-tensor KV-cache management over a simulated GPU virtual-memory
//! device, and a trace-driven serving simulator comparing it against
//! contiguous and paged allocation.

pub mod baselines;
pub mod check;
pub mod device;
pub mod metrics;
pub mod ops;
pub mod par;
pub mod pool;
pub mod serve;
pub mod types;
pub mod vts;

pub use device::{Device, DeviceConfig, DeviceError, PhysicalHandle, VirtualRange};
pub use metrics::{bytes_per_token, MemoryBreakdown, ModelGeometry};
pub use ops::{ManagerConfig, OpsError, ReclaimReport, VTensorManager};
pub use types::{RecordId, RequestId, TokenId};
pub use vts::{Vts, VtsConfig, VtsError};
pub use serve::{run_trace, AllocatorKind, KvBackend, SimConfig, SimulationReport, TraceRecord};
