//! Analytical roofline model of shared-KV serving.
//!
//! Decode is modeled as three memory/compute components per token step:
//!
//! * unique attention — every request reads its own KV store;
//! * shared attention — the shared store is read once per step when the
//!   policy batches queries into a shared GEMM, once per request otherwise,
//!   and shrinks to the routed fraction when the policy routes sparsely;
//! * weights/FFN — the weight matrices stream once per step, with FLOPs
//!   proportional to the batch.
//!
//! Each component takes `max(bytes / bandwidth, flops / peak)` on the
//! aggregate cluster; per-token latency is their sum (an overlap toggle
//! switches the sum to a max). Capacity limits come directly from KV
//! footprints. Routing cost and inter-node transfers are deliberately not
//! modeled — they are second-order for the desk-scale questions this
//! answers (how far each policy's batch scales and which resource bounds
//! each node pool).

use crate::config::{HardwareSpec, ModelSpec, PolicySpec, WorkloadSpec};
use serde::Serialize;

/// Published peak speedup figure quoted next to sweep results so the
/// reproduced ratio can be compared at a glance.
pub const PUBLISHED_PEAK_SPEEDUP: f64 = 538.7;

/// Which pipeline stage an operation count belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum OpCategory {
    UniqueAttention,
    SharedAttention,
    WeightsFfn,
}

impl OpCategory {
    pub fn label(self) -> &'static str {
        match self {
            OpCategory::UniqueAttention => "unique_attention",
            OpCategory::SharedAttention => "shared_attention",
            OpCategory::WeightsFfn => "weights_ffn",
        }
    }
}

/// FLOPs and bytes one component moves in one token step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OpStats {
    pub flops: f64,
    pub bytes_read: f64,
    pub category: OpCategory,
}

impl OpStats {
    pub fn zero(category: OpCategory) -> Self {
        Self {
            flops: 0.0,
            bytes_read: 0.0,
            category,
        }
    }

    /// FLOPs per byte; `None` when nothing is read.
    pub fn arithmetic_intensity(&self) -> Option<f64> {
        (self.bytes_read > 0.0).then(|| self.flops / self.bytes_read)
    }
}

/// How component times combine into a per-token latency.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OverlapModel {
    /// Components execute serially (the conservative default).
    #[default]
    Sum,
    /// Components overlap perfectly; the slowest one dominates.
    Max,
}

impl std::str::FromStr for OverlapModel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sum" => Ok(OverlapModel::Sum),
            "max" => Ok(OverlapModel::Max),
            other => Err(format!("unknown overlap model `{other}` (expected sum or max)")),
        }
    }
}

/// Evaluation knobs that are not part of the scenario itself.
#[derive(Debug, Clone, Copy)]
pub struct ModelOptions {
    /// Cap per-request rate at the workload's target rate.
    pub slo_cap: bool,
    pub overlap: OverlapModel,
}

impl Default for ModelOptions {
    fn default() -> Self {
        Self {
            slo_cap: true,
            overlap: OverlapModel::Sum,
        }
    }
}

/// Per-request and one-time KV footprints under a policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KvFootprint {
    /// Unique-context bytes each request holds.
    pub unique_bytes: u64,
    /// Shared-context bytes replicated into each request (zero under reuse).
    pub shared_bytes_per_request: u64,
    /// Shared-context bytes stored once system-wide (zero without reuse).
    pub shared_bytes_one_time: u64,
}

impl KvFootprint {
    pub fn per_request_total(&self) -> u64 {
        self.unique_bytes + self.shared_bytes_per_request
    }
}

/// KV bytes a request costs under `policy`. Reuse keeps one copy of the
/// shared store system-wide; without it every request carries a full copy
/// (routing reduces what is *read*, not what is *stored*).
pub fn per_request_kv_bytes(
    policy: &PolicySpec,
    workload: &WorkloadSpec,
    model: &ModelSpec,
) -> KvFootprint {
    let per_token = model.kv_bytes_per_token();
    let shared = workload.shared_len * per_token;
    let unique = workload.unique_len * per_token;
    if policy.kv_reuse {
        KvFootprint {
            unique_bytes: unique,
            shared_bytes_per_request: 0,
            shared_bytes_one_time: shared,
        }
    } else {
        KvFootprint {
            unique_bytes: unique,
            shared_bytes_per_request: shared,
            shared_bytes_one_time: 0,
        }
    }
}

/// Largest batch whose KV fits: weights and any one-time shared store are
/// carved out of aggregate capacity first, the rest divides by the
/// per-request footprint. Zero when the fixed costs alone do not fit.
pub fn max_batch(
    policy: &PolicySpec,
    workload: &WorkloadSpec,
    model: &ModelSpec,
    hw: &HardwareSpec,
) -> u64 {
    let foot = per_request_kv_bytes(policy, workload, model);
    let fixed = model.weights_bytes() as f64 + foot.shared_bytes_one_time as f64;
    let budget = hw.aggregate_capacity() - fixed;
    if budget < 0.0 {
        return 0;
    }
    let per_request = foot.per_request_total() as f64;
    if per_request <= 0.0 {
        return 0;
    }
    (budget / per_request).floor() as u64
}

/// One roofline component: its operation counts and the times implied by
/// the bandwidth and compute ceilings it ran against.
#[derive(Debug, Clone, Copy)]
pub struct ComponentTime {
    pub stats: OpStats,
    pub bandwidth_time: f64,
    pub compute_time: f64,
    /// `max(bandwidth_time, compute_time)` — the roofline bound.
    pub time: f64,
}

fn roofline(stats: OpStats, bandwidth: f64, peak_flops: f64) -> ComponentTime {
    let bandwidth_time = stats.bytes_read / bandwidth;
    let compute_time = stats.flops / peak_flops;
    ComponentTime {
        stats,
        bandwidth_time,
        compute_time,
        time: bandwidth_time.max(compute_time),
    }
}

/// The three components of one token step.
#[derive(Debug, Clone)]
pub struct StepProfile {
    pub components: Vec<ComponentTime>,
}

impl StepProfile {
    pub fn latency(&self, overlap: OverlapModel) -> f64 {
        match overlap {
            OverlapModel::Sum => self.components.iter().map(|c| c.time).sum(),
            OverlapModel::Max => self
                .components
                .iter()
                .map(|c| c.time)
                .fold(0.0, f64::max),
        }
    }

    pub fn component(&self, category: OpCategory) -> &ComponentTime {
        self.components
            .iter()
            .find(|c| c.stats.category == category)
            .expect("profile holds all three components")
    }
}

fn attention_flops(batch: f64, context_len: f64, model: &ModelSpec) -> f64 {
    // Score and value products, two FLOPs per multiply-accumulate each, per
    // query head across all layers. Grouped KV heads change bytes, not FLOPs.
    4.0 * batch
        * context_len
        * model.num_layers as f64
        * model.num_q_heads as f64
        * model.head_dim as f64
}

/// Operation counts per token step under `policy`.
pub fn step_stats(
    policy: &PolicySpec,
    workload: &WorkloadSpec,
    model: &ModelSpec,
    batch: u64,
) -> [OpStats; 3] {
    let b = batch as f64;
    let per_token = model.kv_bytes_per_token() as f64;

    let unique_len = workload.unique_len as f64;
    let unique = OpStats {
        flops: attention_flops(b, unique_len, model),
        bytes_read: b * unique_len * per_token,
        category: OpCategory::UniqueAttention,
    };

    let shared_len = workload.shared_len as f64;
    let effective_len = if policy.sparse_routing {
        shared_len * (1.0 - workload.sparsity)
    } else {
        shared_len
    };
    // A batched shared GEMM reads the store once per step; otherwise each
    // request streams it separately.
    let shared_reads = if policy.shared_batched_gemm {
        batch.min(1) as f64
    } else {
        b
    };
    let shared = OpStats {
        flops: attention_flops(b, effective_len, model),
        bytes_read: effective_len * per_token * shared_reads,
        category: OpCategory::SharedAttention,
    };

    let weights = OpStats {
        flops: 2.0 * model.param_count as f64 * b,
        bytes_read: model.weights_bytes() as f64,
        category: OpCategory::WeightsFfn,
    };

    [unique, shared, weights]
}

/// Roofline times for one token step on the aggregate cluster.
pub fn attention_times(
    policy: &PolicySpec,
    workload: &WorkloadSpec,
    model: &ModelSpec,
    hw: &HardwareSpec,
    batch: u64,
) -> StepProfile {
    let bandwidth = hw.aggregate_bandwidth();
    let peak = hw.aggregate_peak_flops();
    let components = step_stats(policy, workload, model, batch)
        .into_iter()
        .map(|stats| roofline(stats, bandwidth, peak))
        .collect();
    StepProfile { components }
}

/// Whether a sweep row is a regular batch point or the per-(policy, length)
/// capability summary evaluated at the policy's own batch limit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RowKind {
    Sweep,
    MaxBatch,
}

impl RowKind {
    pub fn label(self) -> &'static str {
        match self {
            RowKind::Sweep => "sweep",
            RowKind::MaxBatch => "max_batch",
        }
    }
}

/// One evaluated (policy, shared length, batch) point.
#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub policy: String,
    pub shared_len: u64,
    pub batch: u64,
    pub max_batch: u64,
    pub latency_per_token: f64,
    pub rate_per_request: f64,
    pub system_throughput: f64,
    pub normalized_throughput: f64,
    pub kind: RowKind,
}

/// The normalization baseline: no reuse, no batching, no routing, evaluated
/// at the same shared length and batch regardless of whether that batch
/// would actually fit under the baseline's own capacity. Holding the batch
/// fixed keeps baseline rows at exactly 1.0 and makes the ratio a pure
/// bandwidth/FLOP statement.
fn baseline_policy() -> PolicySpec {
    PolicySpec::new("FlashAttention", false, false, false)
}

fn system_throughput_at(
    policy: &PolicySpec,
    workload: &WorkloadSpec,
    model: &ModelSpec,
    hw: &HardwareSpec,
    batch: u64,
    opts: &ModelOptions,
) -> (f64, f64, f64) {
    let profile = attention_times(policy, workload, model, hw, batch);
    let latency = profile.latency(opts.overlap);
    let raw_rate = if latency > 0.0 {
        1.0 / latency
    } else {
        f64::INFINITY
    };
    let rate = if opts.slo_cap {
        raw_rate.min(workload.target_rate)
    } else {
        raw_rate
    };
    (latency, rate, batch as f64 * rate)
}

/// Everything held fixed across one (policy, shared length) slice of a
/// sweep; rows vary only in batch.
struct SweepScenario<'a> {
    policy: &'a PolicySpec,
    workload: &'a WorkloadSpec,
    model: &'a ModelSpec,
    hw: &'a HardwareSpec,
    opts: &'a ModelOptions,
    batch_limit: u64,
}

impl SweepScenario<'_> {
    fn row(&self, batch: u64, kind: RowKind) -> SweepRow {
        if batch == 0 {
            // Nothing fits; render an explicit zero row rather than erroring.
            return SweepRow {
                policy: self.policy.name.clone(),
                shared_len: self.workload.shared_len,
                batch: 0,
                max_batch: self.batch_limit,
                latency_per_token: 0.0,
                rate_per_request: 0.0,
                system_throughput: 0.0,
                normalized_throughput: 0.0,
                kind,
            };
        }
        let (latency, rate, system) = system_throughput_at(
            self.policy,
            self.workload,
            self.model,
            self.hw,
            batch,
            self.opts,
        );
        let (_, _, base) = system_throughput_at(
            &baseline_policy(),
            self.workload,
            self.model,
            self.hw,
            batch,
            self.opts,
        );
        SweepRow {
            policy: self.policy.name.clone(),
            shared_len: self.workload.shared_len,
            batch,
            max_batch: self.batch_limit,
            latency_per_token: latency,
            rate_per_request: rate,
            system_throughput: system,
            normalized_throughput: if base > 0.0 { system / base } else { 0.0 },
            kind,
        }
    }
}

/// Sweeps one policy over every configured shared length: one row per
/// feasible configured batch plus a summary row at the policy's batch limit.
pub fn throughput(
    policy: &PolicySpec,
    workload: &WorkloadSpec,
    model: &ModelSpec,
    hw: &HardwareSpec,
    opts: &ModelOptions,
) -> Vec<SweepRow> {
    let mut rows = Vec::new();
    for &shared_len in &workload.shared_lens {
        let point = workload.with_shared_len(shared_len);
        let scenario = SweepScenario {
            policy,
            workload: &point,
            model,
            hw,
            opts,
            batch_limit: max_batch(policy, &point, model, hw),
        };
        for &batch in &workload.batch_sizes {
            if batch <= scenario.batch_limit {
                rows.push(scenario.row(batch, RowKind::Sweep));
            }
        }
        rows.push(scenario.row(scenario.batch_limit, RowKind::MaxBatch));
    }
    rows
}

/// Which pool of the disaggregated layout a profile describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeRole {
    UniqueNode,
    SharedNode,
    /// The whole cluster treated as one pool (used by the throughput model).
    Monolithic,
}

impl NodeRole {
    pub fn label(self) -> &'static str {
        match self {
            NodeRole::UniqueNode => "unique_node",
            NodeRole::SharedNode => "shared_node",
            NodeRole::Monolithic => "monolithic",
        }
    }
}

/// Resource picture of one node pool during one token step.
#[derive(Debug, Clone)]
pub struct NodeProfile {
    pub role: NodeRole,
    pub capacity_used: f64,
    pub bandwidth_time: f64,
    pub compute_time: f64,
    /// Achieved fraction of peak FLOP/s: `(flops/peak) / max(flops/peak,
    /// bytes/bandwidth)` — 1.0 when compute-bound, proportionally less when
    /// bandwidth starves the math.
    pub mfu: f64,
    /// Achieved fraction of peak bandwidth, defined symmetrically to `mfu`.
    pub bw_util: f64,
    /// Fraction of pool capacity occupied (clamped to 1.0; see `feasible`).
    pub cap_util: f64,
    pub feasible: bool,
}

fn pool_profile(
    role: NodeRole,
    stats: &[OpStats],
    capacity_used: f64,
    nodes: u64,
    hw: &HardwareSpec,
) -> NodeProfile {
    let bandwidth = hw.node_bandwidth() * nodes as f64;
    let peak = hw.node_peak_flops() * nodes as f64;
    let capacity = hw.node_capacity() * nodes as f64;
    let bytes: f64 = stats.iter().map(|s| s.bytes_read).sum();
    let flops: f64 = stats.iter().map(|s| s.flops).sum();
    let bandwidth_time = bytes / bandwidth;
    let compute_time = flops / peak;
    let bound = bandwidth_time.max(compute_time);
    let (mfu, bw_util) = if bound > 0.0 {
        (compute_time / bound, bandwidth_time / bound)
    } else {
        (0.0, 0.0)
    };
    let raw_cap = capacity_used / capacity;
    NodeProfile {
        role,
        capacity_used,
        bandwidth_time,
        compute_time,
        mfu,
        bw_util,
        cap_util: raw_cap.min(1.0),
        feasible: raw_cap <= 1.0,
    }
}

/// Utilization of the disaggregated layout at one batch size: the unique
/// pool serves per-request attention plus the weights/FFN, the shared pool
/// serves batched, routed shared attention over the full resident store.
/// A batch the unique pool cannot hold is reported infeasible, not an error.
pub fn node_utilization(
    workload: &WorkloadSpec,
    model: &ModelSpec,
    hw: &HardwareSpec,
    batch: u64,
) -> Vec<NodeProfile> {
    // The shared pool runs the full sharing pipeline; express that as the
    // all-mechanisms policy so the stats come from one place.
    let shared_policy = PolicySpec::new("shared-pipeline", true, true, true);
    let [unique, shared, weights] = step_stats(&shared_policy, workload, model, batch);

    let per_token = model.kv_bytes_per_token() as f64;
    let unique_capacity =
        model.weights_bytes() as f64 + batch as f64 * workload.unique_len as f64 * per_token;
    let shared_capacity = workload.shared_len as f64 * per_token;

    vec![
        pool_profile(
            NodeRole::UniqueNode,
            &[unique, weights],
            unique_capacity,
            hw.num_unique_nodes,
            hw,
        ),
        pool_profile(
            NodeRole::SharedNode,
            &[shared],
            shared_capacity,
            hw.num_shared_nodes,
            hw,
        ),
    ]
}

/// Which KV reductions a scaling table applies.
#[derive(Debug, Clone, Copy, Default)]
pub struct ScalingFlags {
    /// Grouped-query attention: divide by `num_q_heads / num_kv_heads`.
    pub gqa: bool,
    /// Routed sparsity: divide by `1 / (1 - sparsity)`.
    pub sparse: bool,
    /// Quantization below 16-bit: divide by `2 / kv_bytes_per_element`.
    pub quant: bool,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct ScalingRow {
    pub batch: u64,
    pub seq_len: u64,
    pub normalized_size: f64,
}

/// KV-cache growth across (batch, sequence length), normalized to the first
/// configured cell of an unoptimized (full-head, 16-bit, dense) cache. The
/// three reduction factors compose multiplicatively.
pub fn kv_scaling_table(
    model: &ModelSpec,
    workload: &WorkloadSpec,
    flags: ScalingFlags,
) -> Vec<ScalingRow> {
    let mut reduction = 1.0;
    if flags.gqa {
        reduction *= model.num_q_heads as f64 / model.num_kv_heads as f64;
    }
    if flags.sparse {
        reduction *= 1.0 / (1.0 - workload.sparsity);
    }
    if flags.quant {
        reduction *= 2.0 / model.kv_bytes_per_element as f64;
    }
    let base_batch = workload.batch_sizes[0] as f64;
    let base_len = workload.shared_lens[0] as f64;
    let mut rows = Vec::new();
    for &batch in &workload.batch_sizes {
        for &seq_len in &workload.shared_lens {
            let normalized_size =
                (batch as f64 * seq_len as f64) / (base_batch * base_len * reduction);
            rows.push(ScalingRow {
                batch,
                seq_len,
                normalized_size,
            });
        }
    }
    rows
}
