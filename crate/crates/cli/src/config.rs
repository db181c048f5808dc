//! Simulation settings: flags override the config file, which overrides
//! built-in defaults.

use std::path::Path;

use anyhow::{Context, Result};
use clap::Args;
use serde::Deserialize;
use vtensor::serve::SimConfig;

use crate::units::parse_bytes;

/// A size given as a plain byte count or a suffixed string.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum Size {
    Bytes(u64),
    Text(String),
}

impl Size {
    fn bytes(&self) -> Result<u64, String> {
        match self {
            Size::Bytes(b) => Ok(*b),
            Size::Text(s) => parse_bytes(s),
        }
    }
}

/// Keys accepted in the TOML config file. All optional.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub capacity: Option<Size>,
    pub chunk: Option<Size>,
    pub weights: Option<Size>,
    pub activation_per_request: Option<Size>,
    pub layers: Option<u64>,
    pub kv_heads: Option<u64>,
    pub head_dim: Option<u64>,
    pub elem_bytes: Option<u64>,
    pub max_seq: Option<usize>,
    pub initial_alloc: Option<usize>,
    pub lookahead: Option<usize>,
    pub block_size: Option<usize>,
    pub max_batch: Option<usize>,
    pub prefill_cost: Option<u64>,
    pub decode_cost: Option<u64>,
    pub mem_op_cost: Option<u64>,
    pub prefix_cache_max_chunks: Option<usize>,
    pub evict_prefix: Option<bool>,
    pub seed: Option<u64>,
    pub max_steps: Option<u64>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct SimArgs {
    /// TOML file with simulation settings
    #[arg(long, env = "VTSIM_CONFIG")]
    pub config: Option<std::path::PathBuf>,
    /// Device memory, e.g. 80GiB
    #[arg(long, env = "VTSIM_CAPACITY", value_parser = parse_bytes)]
    pub capacity: Option<u64>,
    /// Physical chunk size, e.g. 2MiB
    #[arg(long, env = "VTSIM_CHUNK", value_parser = parse_bytes)]
    pub chunk: Option<u64>,
    /// Memory taken by model weights
    #[arg(long, env = "VTSIM_WEIGHTS", value_parser = parse_bytes)]
    pub weights: Option<u64>,
    #[arg(long, env = "VTSIM_ACTIVATION", value_parser = parse_bytes)]
    pub activation_per_request: Option<u64>,
    #[arg(long, env = "VTSIM_LAYERS")]
    pub layers: Option<u64>,
    #[arg(long, env = "VTSIM_KV_HEADS")]
    pub kv_heads: Option<u64>,
    #[arg(long, env = "VTSIM_HEAD_DIM")]
    pub head_dim: Option<u64>,
    #[arg(long, env = "VTSIM_ELEM_BYTES")]
    pub elem_bytes: Option<u64>,
    /// Maximum tokens per request
    #[arg(long, env = "VTSIM_MAX_SEQ")]
    pub max_seq: Option<usize>,
    /// Tokens provisioned when a request starts
    #[arg(long, env = "VTSIM_INITIAL_ALLOC")]
    pub initial_alloc: Option<usize>,
    /// Chunks mapped ahead of the token count
    #[arg(long, env = "VTSIM_LOOKAHEAD")]
    pub lookahead: Option<usize>,
    /// Paged allocator block size in tokens
    #[arg(long, env = "VTSIM_BLOCK_SIZE")]
    pub block_size: Option<usize>,
    #[arg(long, env = "VTSIM_MAX_BATCH")]
    pub max_batch: Option<usize>,
    #[arg(long, env = "VTSIM_PREFILL_COST")]
    pub prefill_cost: Option<u64>,
    #[arg(long, env = "VTSIM_DECODE_COST")]
    pub decode_cost: Option<u64>,
    #[arg(long, env = "VTSIM_MEM_OP_COST")]
    pub mem_op_cost: Option<u64>,
    #[arg(long, env = "VTSIM_PREFIX_CACHE_MAX_CHUNKS")]
    pub prefix_cache_max_chunks: Option<usize>,
    /// Drop prefix records when emptying memory at the end of a run
    #[arg(long, env = "VTSIM_EVICT_PREFIX")]
    pub evict_prefix: Option<bool>,
    #[arg(long, env = "VTSIM_SEED")]
    pub seed: Option<u64>,
    #[arg(long, env = "VTSIM_MAX_STEPS")]
    pub max_steps: Option<u64>,
}

macro_rules! layer {
    ($dst:expr, $flag:expr, $file:expr) => {
        if let Some(v) = $flag.or($file) {
            $dst = v;
        }
    };
}

impl SimArgs {
    pub fn resolve(&self) -> Result<SimConfig> {
        let file = match &self.config {
            Some(p) => FileConfig::load(p)?,
            None => FileConfig::default(),
        };
        let size = |s: &Option<Size>, key: &str| -> Result<Option<u64>> {
            s.as_ref().map(|s| s.bytes()).transpose().map_err(|e| anyhow::anyhow!("config `{key}`: {e}"))
        };
        let mut c = SimConfig::default();
        layer!(c.device.capacity_bytes, self.capacity, size(&file.capacity, "capacity")?);
        layer!(c.device.chunk_size_bytes, self.chunk, size(&file.chunk, "chunk")?);
        layer!(c.device.weights_bytes, self.weights, size(&file.weights, "weights")?);
        layer!(
            c.device.activation_bytes_per_request,
            self.activation_per_request,
            size(&file.activation_per_request, "activation_per_request")?
        );
        layer!(c.geometry.layers, self.layers, file.layers);
        layer!(c.geometry.kv_heads, self.kv_heads, file.kv_heads);
        layer!(c.geometry.head_dim, self.head_dim, file.head_dim);
        layer!(c.geometry.elem_bytes, self.elem_bytes, file.elem_bytes);
        layer!(c.max_seq_len, self.max_seq, file.max_seq);
        layer!(c.initial_alloc_tokens, self.initial_alloc, file.initial_alloc);
        layer!(c.lookahead_chunks, self.lookahead, file.lookahead);
        layer!(c.block_size_tokens, self.block_size, file.block_size);
        layer!(c.max_batch, self.max_batch, file.max_batch);
        layer!(c.prefill_cost_per_token, self.prefill_cost, file.prefill_cost);
        layer!(c.decode_cost_per_request, self.decode_cost, file.decode_cost);
        layer!(c.mem_op_cost, self.mem_op_cost, file.mem_op_cost);
        if let Some(n) = self.prefix_cache_max_chunks.or(file.prefix_cache_max_chunks) {
            c.prefix_cache_max_chunks = Some(n);
        }
        layer!(c.evict_prefix_at_end, self.evict_prefix, file.evict_prefix);
        layer!(c.seed, self.seed, file.seed);
        layer!(c.max_steps, self.max_steps, file.max_steps);
        c.validate().map_err(|e| anyhow::anyhow!("invalid configuration: {e}"))?;
        Ok(c)
    }
}
