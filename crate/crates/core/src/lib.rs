//! Shared-KV attention reference kernels and an analytical serving model.
//!
//! The crate has four parts:
//!
//! * [`config`] — model/hardware/workload/policy descriptions, loadable from
//!   a TOML file with fail-loud validation.
//! * [`attention`] — exact double-precision attention kernels: chunked
//!   online-softmax attention with mergeable partial states, a monolithic
//!   reference implementation, and batched shared-query attention that
//!   evaluates many queries against one KV chunk as two matrix products.
//! * [`router`] — top-k chunk routing over mean-of-keys chunk embeddings.
//! * [`perf`] — a roofline model of disaggregated serving: KV capacity,
//!   batch limits, per-token latency, throughput sweeps, and per-node
//!   utilization profiles for a family of KV-sharing policies.
//!
//! Everything is deterministic: synthetic data comes from the documented
//! generator in [`gen`], and all analytical results are pure functions of
//! the loaded configuration.

pub mod attention;
pub mod config;
pub mod gen;
pub mod perf;
pub mod router;
