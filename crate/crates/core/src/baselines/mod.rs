//! Reference allocators: contiguous max-length padding and a statically
//! pre-allocated block pool with per-request block tables.

mod native;
mod paged;

pub use native::NativeBackend;
pub use paged::PagedBackend;
