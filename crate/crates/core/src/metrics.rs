//! Memory-breakdown accounting shared by every allocator.

use serde::{Deserialize, Serialize};

/// KV geometry of the served model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelGeometry {
    pub layers: u64,
    pub kv_heads: u64,
    pub head_dim: u64,
    pub elem_bytes: u64,
}

impl ModelGeometry {
    /// 32 layers, 4 KV heads of dim 128, fp16: the GQA layout of a Yi-6B class model.
    pub const YI_6B: ModelGeometry = ModelGeometry { layers: 32, kv_heads: 4, head_dim: 128, elem_bytes: 2 };
}

impl Default for ModelGeometry {
    fn default() -> Self {
        Self::YI_6B
    }
}

/// Bytes of K and V cached per token across all layers.
pub fn bytes_per_token(g: &ModelGeometry) -> u64 {
    assert!(
        g.layers > 0 && g.kv_heads > 0 && g.head_dim > 0 && g.elem_bytes > 0,
        "geometry fields must be positive: {g:?}"
    );
    2 * g.layers * g.kv_heads * g.head_dim * g.elem_bytes
}

/// Device memory split into disjoint categories that sum to capacity.
///
/// `reserved` is the sum of `lookahead`, `pinned` and `retained`; the paged
/// baseline reports its unused pool as `reserved` with the sub-fields zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MemoryBreakdown {
    pub capacity: u64,
    pub weights: u64,
    pub activation: u64,
    /// Bytes holding live KV tokens.
    pub kv_used: u64,
    /// Physical footprint attributed to the KV cache.
    pub kv_allocated: u64,
    pub reserved: u64,
    /// Provisioned ahead of the token count (whole chunks with no live token).
    pub lookahead: u64,
    /// Held only by prefix records.
    pub pinned: u64,
    /// Unmapped chunks kept on the reuse list by lazy deallocation.
    pub retained: u64,
    /// Allocated but neither used nor reserved: the unused tail of partially filled units.
    pub fragmentation: u64,
    pub free: u64,
    /// Requests holding KV memory at the snapshot.
    pub active_requests: u64,
}

impl MemoryBreakdown {
    pub fn sum(&self) -> u64 {
        self.weights + self.activation + self.kv_used + self.reserved + self.fragmentation + self.free
    }

    /// Checks the category identities; returns a description of the first failure.
    pub fn check(&self) -> Result<(), String> {
        if self.sum() != self.capacity {
            return Err(format!("components sum to {} but capacity is {}", self.sum(), self.capacity));
        }
        if self.kv_used + self.reserved + self.fragmentation != self.kv_allocated {
            return Err(format!(
                "kv_used {} + reserved {} + fragmentation {} != kv_allocated {}",
                self.kv_used, self.reserved, self.fragmentation, self.kv_allocated
            ));
        }
        Ok(())
    }

    pub fn free_fraction(&self) -> f64 {
        self.free as f64 / self.capacity as f64
    }

    /// Share of allocated KV bytes not holding live tokens.
    pub fn fragmentation_ratio(&self) -> f64 {
        if self.kv_allocated == 0 {
            0.0
        } else {
            1.0 - self.kv_used as f64 / self.kv_allocated as f64
        }
    }
}

/// Builds a breakdown from its parts, deriving `reserved`, `fragmentation` and `free`.
pub struct BreakdownParts {
    pub capacity: u64,
    pub weights: u64,
    pub activation: u64,
    pub kv_used: u64,
    pub kv_allocated: u64,
    pub lookahead: u64,
    pub pinned: u64,
    pub retained: u64,
    /// Reserved bytes not covered by the three sub-fields (paged pool surplus).
    pub other_reserved: u64,
    pub active_requests: u64,
}

impl From<BreakdownParts> for MemoryBreakdown {
    fn from(p: BreakdownParts) -> Self {
        let reserved = p.lookahead + p.pinned + p.retained + p.other_reserved;
        let fragmentation = p
            .kv_allocated
            .checked_sub(p.kv_used + reserved)
            .expect("used plus reserved exceeds allocated");
        let free = p
            .capacity
            .checked_sub(p.weights + p.activation + p.kv_allocated)
            .expect("allocation exceeds capacity");
        MemoryBreakdown {
            capacity: p.capacity,
            weights: p.weights,
            activation: p.activation,
            kv_used: p.kv_used,
            kv_allocated: p.kv_allocated,
            reserved,
            lookahead: p.lookahead,
            pinned: p.pinned,
            retained: p.retained,
            fragmentation,
            free,
            active_requests: p.active_requests,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlexibilitySummary {
    pub steps: usize,
    pub mean_free_fraction: f64,
    pub mean_free_bytes: f64,
    pub peak_kv_allocated: u64,
    pub stall_rate: f64,
    pub stall_count: usize,
    pub preemption_count: usize,
}

/// Aggregates per-step breakdowns. `stalls` counts stalled steps.
pub fn flexibility_summary(
    breakdowns: &[MemoryBreakdown],
    stalls: usize,
    preemptions: usize,
) -> FlexibilitySummary {
    let steps = breakdowns.len();
    let (free_frac, free_bytes) = if steps == 0 {
        (0.0, 0.0)
    } else {
        let n = steps as f64;
        (
            breakdowns.iter().map(MemoryBreakdown::free_fraction).sum::<f64>() / n,
            breakdowns.iter().map(|b| b.free as f64).sum::<f64>() / n,
        )
    };
    FlexibilitySummary {
        steps,
        mean_free_fraction: free_frac,
        mean_free_bytes: free_bytes,
        peak_kv_allocated: breakdowns.iter().map(|b| b.kv_allocated).max().unwrap_or(0),
        stall_rate: if steps == 0 { 0.0 } else { stalls as f64 / steps as f64 },
        stall_count: stalls,
        preemption_count: preemptions,
    }
}
