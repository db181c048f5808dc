use serde::{Deserialize, Serialize};

/// Opaque token id. Prefix equality is exact id equality.
pub type TokenId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RequestId(pub u64);

impl std::fmt::Display for RequestId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "req{}", self.0)
    }
}

/// Identity of a prefix record held by the radix tree.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RecordId(pub u64);

pub fn div_ceil(a: usize, b: usize) -> usize {
    a.div_ceil(b)
}

/// Largest multiple of `unit` not exceeding `n`.
pub fn align_down(n: usize, unit: usize) -> usize {
    n - n % unit
}
