//! Serving-scenario configuration: model, hardware, workload, and policies.
//!
//! A scenario is described by one TOML file with four sections. Every key is
//! optional and falls back to the built-in defaults (an 8B-parameter
//! Llama-3.1-class model served in FP8 on two 8xH200 nodes); unknown keys are
//! rejected so a typo cannot silently fall back to a default. Quantities that
//! count bytes or tokens accept either a plain integer or a string with a
//! binary-scaled suffix: `B`, `K`/`KB`, `M`/`MB`, `G`/`GB`, `T`/`TB`, each a
//! power of 1024 (so `"64K"` is 65536 and `"141GB"` is 141 * 1024^3).
//!
//! Note that the built-in hardware defaults are the vendor-sheet figures in
//! decimal units (141 GB = 141e9 bytes, 4.8 TB/s = 4.8e12 B/s); the binary
//! suffixes only apply to values written in a config file.

use serde::{Deserialize, Deserializer, Serialize};
use std::path::Path;
use thiserror::Error;

const KI: u64 = 1024;
const MI: u64 = 1024 * 1024;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("failed to read config file {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("failed to parse config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("config invariant violated at `{key}`: {message}")]
    Invariant { key: String, message: String },
}

fn invariant(key: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invariant {
        key: key.to_string(),
        message: message.into(),
    }
}

/// Transformer shape and precision, reduced to what the KV-cache and FLOP
/// accounting needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSpec {
    pub num_layers: u64,
    pub num_q_heads: u64,
    /// Grouped-query attention: several query heads share one KV head, so
    /// this controls cache size while `num_q_heads` controls attention FLOPs.
    pub num_kv_heads: u64,
    pub head_dim: u64,
    #[serde(deserialize_with = "de_scaled_u64")]
    pub param_count: u64,
    pub weight_bytes_per_param: u64,
    /// Bytes per stored K or V element: 1 (FP8), 2 (FP16/BF16), or 4 (FP32).
    pub kv_bytes_per_element: u64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        // Llama-3.1-8B-class shape, weights and KV cache both in FP8.
        Self {
            num_layers: 32,
            num_q_heads: 32,
            num_kv_heads: 8,
            head_dim: 128,
            param_count: 8_030_000_000,
            weight_bytes_per_param: 1,
            kv_bytes_per_element: 1,
        }
    }
}

impl ModelSpec {
    /// Bytes of KV cache per token: K and V planes across all layers and KV
    /// heads.
    pub fn kv_bytes_per_token(&self) -> u64 {
        2 * self.num_layers * self.num_kv_heads * self.head_dim * self.kv_bytes_per_element
    }

    /// Resident bytes for the model weights.
    pub fn weights_bytes(&self) -> u64 {
        self.param_count * self.weight_bytes_per_param
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let counts = [
            ("model.num_layers", self.num_layers),
            ("model.num_q_heads", self.num_q_heads),
            ("model.num_kv_heads", self.num_kv_heads),
            ("model.head_dim", self.head_dim),
            ("model.param_count", self.param_count),
            ("model.weight_bytes_per_param", self.weight_bytes_per_param),
        ];
        for (key, value) in counts {
            if value == 0 {
                return Err(invariant(key, "must be a positive count"));
            }
        }
        if !self.num_q_heads.is_multiple_of(self.num_kv_heads) {
            return Err(invariant(
                "model.num_q_heads",
                format!(
                    "must be a positive multiple of num_kv_heads ({} % {} != 0)",
                    self.num_q_heads, self.num_kv_heads
                ),
            ));
        }
        if ![1, 2, 4].contains(&self.kv_bytes_per_element) {
            return Err(invariant(
                "model.kv_bytes_per_element",
                format!("must be 1, 2, or 4 (got {})", self.kv_bytes_per_element),
            ));
        }
        Ok(())
    }
}

/// A cluster of identical GPU nodes, split into a pool serving per-request
/// (unique) KV and a pool serving the shared KV store.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HardwareSpec {
    pub gpus_per_node: u64,
    #[serde(deserialize_with = "de_scaled_u64")]
    pub mem_capacity_per_gpu: u64,
    /// Bytes per second per GPU.
    #[serde(deserialize_with = "de_scaled_u64")]
    pub mem_bandwidth_per_gpu: u64,
    /// Peak FLOP/s per GPU at the serving precision.
    #[serde(deserialize_with = "de_number_u64")]
    pub peak_flops_per_gpu: u64,
    pub num_unique_nodes: u64,
    pub num_shared_nodes: u64,
    /// Fraction of memory held back from KV allocation (fragmentation,
    /// activations, allocator headroom). Applied to every capacity figure.
    pub reserve_fraction: f64,
}

impl Default for HardwareSpec {
    fn default() -> Self {
        // Two H200-class nodes: 141 GB, 4.8 TB/s, 1979 TFLOPS (FP8) per GPU.
        Self {
            gpus_per_node: 8,
            mem_capacity_per_gpu: 141_000_000_000,
            mem_bandwidth_per_gpu: 4_800_000_000_000,
            peak_flops_per_gpu: 1_979_000_000_000_000,
            num_unique_nodes: 1,
            num_shared_nodes: 1,
            reserve_fraction: 0.0,
        }
    }
}

impl HardwareSpec {
    pub fn total_nodes(&self) -> u64 {
        self.num_unique_nodes + self.num_shared_nodes
    }

    fn usable(&self, bytes: f64) -> f64 {
        bytes * (1.0 - self.reserve_fraction)
    }

    /// Usable KV/weight capacity of a single node, in bytes.
    pub fn node_capacity(&self) -> f64 {
        self.usable((self.gpus_per_node * self.mem_capacity_per_gpu) as f64)
    }

    pub fn node_bandwidth(&self) -> f64 {
        (self.gpus_per_node * self.mem_bandwidth_per_gpu) as f64
    }

    pub fn node_peak_flops(&self) -> f64 {
        (self.gpus_per_node * self.peak_flops_per_gpu) as f64
    }

    /// Usable capacity across all nodes in both pools.
    pub fn aggregate_capacity(&self) -> f64 {
        self.node_capacity() * self.total_nodes() as f64
    }

    pub fn aggregate_bandwidth(&self) -> f64 {
        self.node_bandwidth() * self.total_nodes() as f64
    }

    pub fn aggregate_peak_flops(&self) -> f64 {
        self.node_peak_flops() * self.total_nodes() as f64
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let counts = [
            ("hardware.gpus_per_node", self.gpus_per_node),
            ("hardware.mem_capacity_per_gpu", self.mem_capacity_per_gpu),
            ("hardware.mem_bandwidth_per_gpu", self.mem_bandwidth_per_gpu),
            ("hardware.peak_flops_per_gpu", self.peak_flops_per_gpu),
            ("hardware.num_unique_nodes", self.num_unique_nodes),
            ("hardware.num_shared_nodes", self.num_shared_nodes),
        ];
        for (key, value) in counts {
            if value == 0 {
                return Err(invariant(key, "must be a positive count"));
            }
        }
        if !(0.0..1.0).contains(&self.reserve_fraction) {
            return Err(invariant(
                "hardware.reserve_fraction",
                format!("must lie in [0, 1) (got {})", self.reserve_fraction),
            ));
        }
        Ok(())
    }
}

/// The request mix: one shared context every request attends to, plus a
/// per-request unique context.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorkloadSpec {
    /// Shared-context length, in tokens, for single-point evaluations.
    #[serde(deserialize_with = "de_scaled_u64")]
    pub shared_len: u64,
    /// Shared-context lengths swept by the reporting commands.
    #[serde(deserialize_with = "de_scaled_u64_vec")]
    pub shared_lens: Vec<u64>,
    /// Unique-context length per request, in tokens.
    #[serde(deserialize_with = "de_scaled_u64")]
    pub unique_len: u64,
    /// Tokens per shared-KV chunk; every shared length must divide evenly
    /// into chunks.
    #[serde(deserialize_with = "de_scaled_u64")]
    pub chunk_size: u64,
    /// Fraction of the shared context a routed query skips, in [0, 1).
    pub sparsity: f64,
    /// Per-request generation-rate target, tokens/second.
    pub target_rate: f64,
    pub batch_sizes: Vec<u64>,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        Self {
            shared_len: 16 * MI,
            shared_lens: vec![MI, 2 * MI, 4 * MI, 8 * MI, 16 * MI],
            unique_len: 64 * KI,
            chunk_size: 4 * KI,
            sparsity: 0.75,
            target_rate: 35.0,
            batch_sizes: vec![1, 2, 4, 8, 16, 32, 64, 128, 256],
        }
    }
}

impl WorkloadSpec {
    pub fn num_chunks(&self) -> u64 {
        self.shared_len / self.chunk_size
    }

    /// The same workload evaluated at a different shared-context length.
    pub fn with_shared_len(&self, shared_len: u64) -> Self {
        Self {
            shared_len,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.chunk_size == 0 {
            return Err(invariant("workload.chunk_size", "must be a positive count"));
        }
        if self.unique_len == 0 {
            return Err(invariant("workload.unique_len", "must be a positive count"));
        }
        if !self.shared_len.is_multiple_of(self.chunk_size) {
            return Err(invariant(
                "workload.shared_len",
                format!(
                    "must be a multiple of chunk_size ({} % {} != 0)",
                    self.shared_len, self.chunk_size
                ),
            ));
        }
        if self.shared_lens.is_empty() {
            return Err(invariant("workload.shared_lens", "must not be empty"));
        }
        for len in &self.shared_lens {
            if !len.is_multiple_of(self.chunk_size) {
                return Err(invariant(
                    "workload.shared_lens",
                    format!(
                        "every entry must be a multiple of chunk_size ({} % {} != 0)",
                        len, self.chunk_size
                    ),
                ));
            }
        }
        if !(0.0..1.0).contains(&self.sparsity) {
            return Err(invariant(
                "workload.sparsity",
                format!(
                    "must lie in [0, 1) so the derived top-k is at least 1 (got {})",
                    self.sparsity
                ),
            ));
        }
        if !self.target_rate.is_finite() || self.target_rate <= 0.0 {
            return Err(invariant(
                "workload.target_rate",
                format!("must be positive and finite (got {})", self.target_rate),
            ));
        }
        if self.batch_sizes.is_empty() {
            return Err(invariant("workload.batch_sizes", "must not be empty"));
        }
        if self.batch_sizes.contains(&0) {
            return Err(invariant("workload.batch_sizes", "entries must be positive"));
        }
        Ok(())
    }
}

/// One serving policy, described by which of the three shared-KV mechanisms
/// it applies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicySpec {
    pub name: String,
    /// Store the shared context once instead of replicating it per request.
    pub kv_reuse: bool,
    /// Evaluate all co-batched queries against a shared chunk as one pair of
    /// matrix-matrix products, reading the chunk from memory once.
    pub shared_batched_gemm: bool,
    /// Route each query to a top-k subset of shared chunks instead of
    /// attending to the full shared context.
    pub sparse_routing: bool,
}

impl PolicySpec {
    pub fn new(
        name: &str,
        kv_reuse: bool,
        shared_batched_gemm: bool,
        sparse_routing: bool,
    ) -> Self {
        Self {
            name: name.to_string(),
            kv_reuse,
            shared_batched_gemm,
            sparse_routing,
        }
    }

    /// The built-in policy ladder, ordered from no sharing to full sharing.
    pub fn builtin_policies() -> Vec<PolicySpec> {
        vec![
            PolicySpec::new("FlashAttention", false, false, false),
            PolicySpec::new("SGLang", true, false, false),
            PolicySpec::new("LongHeads", false, false, true),
            PolicySpec::new("ChunkAttention", true, true, false),
            PolicySpec::new("MoSKA", true, true, true),
        ]
    }

    fn validate(&self, idx: usize) -> Result<(), ConfigError> {
        let key = format!("policies[{idx}]");
        if self.name.is_empty() {
            return Err(invariant(&format!("{key}.name"), "must not be empty"));
        }
        if self.shared_batched_gemm && !self.kv_reuse {
            return Err(invariant(
                &format!("{key}.shared_batched_gemm"),
                format!(
                    "policy `{}` batches queries over a shared store, which requires kv_reuse",
                    self.name
                ),
            ));
        }
        Ok(())
    }
}

/// A complete scenario. `Default` is the built-in reference scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub model: ModelSpec,
    pub hardware: HardwareSpec,
    pub workload: WorkloadSpec,
    pub policies: Vec<PolicySpec>,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            model: ModelSpec::default(),
            hardware: HardwareSpec::default(),
            workload: WorkloadSpec::default(),
            policies: PolicySpec::builtin_policies(),
        }
    }
}

impl Config {
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.model.validate()?;
        self.hardware.validate()?;
        self.workload.validate()?;
        if self.policies.is_empty() {
            return Err(invariant("policies", "at least one policy is required"));
        }
        for (idx, policy) in self.policies.iter().enumerate() {
            policy.validate(idx)?;
            if self.policies[..idx].iter().any(|p| p.name == policy.name) {
                return Err(invariant(
                    &format!("policies[{idx}].name"),
                    format!("duplicate policy name `{}`", policy.name),
                ));
            }
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let config: Config = toml::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    /// Canonical TOML rendering; reloading it reproduces the same `Config`.
    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }
}

/// Loads and validates a scenario from `path`. A missing file is an error; an
/// empty file yields the built-in defaults.
pub fn load_config(path: &Path) -> Result<Config, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Config::from_toml_str(&text)
}

/// The built-in reference scenario (see the type-level defaults above).
pub fn default_config() -> Config {
    Config::default()
}

/// Parses `141GB`-style quantities: a decimal number followed by an optional
/// binary suffix.
fn parse_scaled(text: &str) -> Result<u64, String> {
    let trimmed = text.trim();
    let split = trimmed
        .find(|c: char| c.is_ascii_alphabetic())
        .unwrap_or(trimmed.len());
    let (num_part, suffix) = trimmed.split_at(split);
    let number: f64 = num_part
        .trim()
        .parse()
        .map_err(|_| format!("`{trimmed}` is not a number with an optional binary suffix"))?;
    let scale: f64 = match suffix.trim().to_ascii_uppercase().as_str() {
        "" | "B" => 1.0,
        "K" | "KB" => 1024f64,
        "M" | "MB" => 1024f64.powi(2),
        "G" | "GB" => 1024f64.powi(3),
        "T" | "TB" => 1024f64.powi(4),
        other => return Err(format!("unknown unit suffix `{other}` in `{trimmed}`")),
    };
    let value = number * scale;
    if !(value >= 0.0 && value <= u64::MAX as f64) {
        return Err(format!("`{trimmed}` is out of range"));
    }
    Ok(value.round() as u64)
}

#[derive(Deserialize)]
#[serde(untagged)]
enum RawQuantity {
    Int(u64),
    Float(f64),
    Text(String),
}

impl RawQuantity {
    fn resolve<E: serde::de::Error>(self) -> Result<u64, E> {
        match self {
            RawQuantity::Int(v) => Ok(v),
            RawQuantity::Float(v) => {
                if v >= 0.0 && v <= u64::MAX as f64 {
                    Ok(v.round() as u64)
                } else {
                    Err(E::custom(format!("quantity {v} is out of range")))
                }
            }
            RawQuantity::Text(s) => parse_scaled(&s).map_err(E::custom),
        }
    }
}

fn de_scaled_u64<'de, D: Deserializer<'de>>(d: D) -> Result<u64, D::Error> {
    RawQuantity::deserialize(d)?.resolve()
}

fn de_scaled_u64_vec<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u64>, D::Error> {
    Vec::<RawQuantity>::deserialize(d)?
        .into_iter()
        .map(RawQuantity::resolve)
        .collect()
}

/// Like [`de_scaled_u64`] but without unit suffixes, for quantities (FLOP/s)
/// where a byte suffix would be misleading. Accepts integer or float tokens
/// so values like `1.979e15` parse naturally.
fn de_number_u64<'de, D: Deserializer<'de>>(d: D) -> Result<u64, D::Error> {
    match RawQuantity::deserialize(d)? {
        RawQuantity::Text(s) => Err(serde::de::Error::custom(format!(
            "`{s}`: unit suffixes are not accepted here; write the value as a number"
        ))),
        other => other.resolve(),
    }
}
