//! The vTensor pool: the set of virtual spaces, the set of physical entries,
//! and the radix tree of recorded prefixes.

mod pset;
mod rtree;
mod vset;

pub use pset::{ChunkState, PSet, PhysicalEntry, PoolError};
pub use rtree::{RadixTree, TreeNodeView};
pub use vset::{SpaceId, SpaceOwner, SpaceState, VSet, VirtualSpace};

use serde::{Deserialize, Serialize};

use crate::types::{RequestId, TokenId};

/// Request-facing view over one virtual space.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VTensor {
    pub space: SpaceId,
    /// KV tokens written so far.
    pub token_count: usize,
    /// Tokens the full virtual range can hold.
    pub capacity_tokens: usize,
    pub tokens: Vec<TokenId>,
    pub owner: Option<RequestId>,
}
