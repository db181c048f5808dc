use serde::{Deserialize, Serialize};

use crate::baselines::{NativeBackend, PagedBackend};
use crate::device::DeviceConfig;
use crate::metrics::{bytes_per_token, ModelGeometry};
use crate::ops::ManagerConfig;
use crate::vts::VtsConfig;

use super::backend::{BackendError, VTensorBackend};

/// Everything a simulation run depends on besides the trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub device: DeviceConfig,
    pub geometry: ModelGeometry,
    pub max_seq_len: usize,
    pub initial_alloc_tokens: usize,
    pub lookahead_chunks: usize,
    pub block_size_tokens: usize,
    pub max_batch: usize,
    /// Compute units per uncached prompt token.
    pub prefill_cost_per_token: u64,
    /// Compute units per decoding request per step.
    pub decode_cost_per_request: u64,
    /// Memory-lane units per primitive device call.
    pub mem_op_cost: u64,
    pub prefix_cache_max_chunks: Option<usize>,
    /// Drop prefix records in the end-of-run memory emptying.
    pub evict_prefix_at_end: bool,
    pub seed: u64,
    pub max_steps: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            device: DeviceConfig::default(),
            geometry: ModelGeometry::default(),
            max_seq_len: 4096,
            initial_alloc_tokens: 256,
            lookahead_chunks: 1,
            block_size_tokens: 16,
            max_batch: 64,
            prefill_cost_per_token: 1,
            decode_cost_per_request: 50,
            mem_op_cost: 1,
            prefix_cache_max_chunks: None,
            evict_prefix_at_end: false,
            seed: 0,
            max_steps: 1_000_000,
        }
    }
}

impl SimConfig {
    pub fn bytes_per_token(&self) -> u64 {
        bytes_per_token(&self.geometry)
    }

    pub fn tokens_per_chunk(&self) -> usize {
        (self.device.chunk_size_bytes / self.bytes_per_token()) as usize
    }

    pub fn validate(&self) -> Result<(), String> {
        self.device.validate().map_err(|e| e.to_string())?;
        let g = &self.geometry;
        if g.layers == 0 || g.kv_heads == 0 || g.head_dim == 0 || g.elem_bytes == 0 {
            return Err(format!("geometry fields must be positive: {g:?}"));
        }
        let bpt = self.bytes_per_token();
        if self.device.chunk_size_bytes % bpt != 0 {
            return Err(format!(
                "chunk size {} is not a multiple of {} bytes per token",
                self.device.chunk_size_bytes, bpt
            ));
        }
        if self.max_seq_len == 0 || self.max_batch == 0 || self.block_size_tokens == 0 {
            return Err("max_seq_len, max_batch and block_size_tokens must be positive".into());
        }
        Ok(())
    }

    pub fn vts_config(&self) -> VtsConfig {
        VtsConfig {
            manager: ManagerConfig {
                device: self.device,
                tokens_per_chunk: self.tokens_per_chunk(),
                max_seq_len: self.max_seq_len,
                prefix_cache_max_chunks: self.prefix_cache_max_chunks,
            },
            initial_alloc_tokens: self.initial_alloc_tokens,
            lookahead_chunks: self.lookahead_chunks,
        }
    }

    pub fn vtensor(&self) -> Result<VTensorBackend, BackendError> {
        VTensorBackend::new(self.vts_config(), self.bytes_per_token())
    }

    pub fn native(&self) -> NativeBackend {
        NativeBackend::new(self.device, self.bytes_per_token(), self.max_seq_len)
    }

    pub fn paged(&self) -> Result<PagedBackend, BackendError> {
        PagedBackend::new(
            self.device,
            self.bytes_per_token(),
            self.block_size_tokens,
            self.max_seq_len,
            self.max_batch as u64 * self.device.activation_bytes_per_request,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::device::MIB;

    #[test]
    fn defaults() {
        let c = SimConfig::default();
        c.validate().unwrap();
        assert_eq!(c.tokens_per_chunk(), 32);
        assert_eq!(c.device.chunk_size_bytes, 2 * MIB);
    }

    #[test]
    fn misaligned_chunk_rejected() {
        let mut c = SimConfig::default();
        c.device.chunk_size_bytes = 2 * MIB;
        c.geometry.layers = 3;
        assert!(c.validate().unwrap_err().contains("multiple"));
    }
}
