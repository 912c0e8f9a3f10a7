//! Property tests for the roofline model: capacity arithmetic against an
//! integer oracle, the bandwidth dichotomy between batched and replicated
//! shared reads, and the latency ordering the policy ladder implies.

use proptest::prelude::*;
use skva_core::config::{default_config, HardwareSpec, ModelSpec, PolicySpec, WorkloadSpec};
use skva_core::perf::{
    attention_times, max_batch, per_request_kv_bytes, step_stats, throughput, ModelOptions,
    OpCategory, OverlapModel, RowKind,
};

fn workload_strategy() -> impl Strategy<Value = WorkloadSpec> {
    (
        prop::sample::select(vec![256u64, 1024, 4096]),
        1u64..=8192,
        1u64..=1 << 20,
        0.0f64..=0.9375,
    )
        .prop_map(|(chunk_size, chunks, unique_len, sparsity)| {
            let shared_len = chunk_size * chunks;
            let workload = WorkloadSpec {
                shared_len,
                shared_lens: vec![shared_len],
                unique_len,
                chunk_size,
                sparsity,
                ..WorkloadSpec::default()
            };
            workload.validate().expect("strategy emits valid workloads");
            workload
        })
}

fn ladder() -> Vec<PolicySpec> {
    PolicySpec::builtin_policies()
}

fn by_name(name: &str) -> PolicySpec {
    ladder().into_iter().find(|p| p.name == name).unwrap()
}

proptest! {
    /// Batch limits match exact integer arithmetic: fixed costs subtract
    /// from aggregate capacity and the remainder divides by the per-request
    /// footprint.
    #[test]
    fn max_batch_matches_integer_oracle(
        workload in workload_strategy(),
        gpu_capacity in 1_000_000_000u64..=200_000_000_000,
    ) {
        let model = ModelSpec::default();
        let hw = HardwareSpec {
            mem_capacity_per_gpu: gpu_capacity,
            ..HardwareSpec::default()
        };
        for policy in ladder() {
            let foot = per_request_kv_bytes(&policy, &workload, &model);
            let aggregate = (hw.total_nodes() * hw.gpus_per_node) as u128 * gpu_capacity as u128;
            let fixed = (model.weights_bytes() + foot.shared_bytes_one_time) as u128;
            let expected = if fixed > aggregate {
                0
            } else {
                (aggregate - fixed) / foot.per_request_total() as u128
            };
            let got = max_batch(&policy, &workload, &model, &hw);
            prop_assert_eq!(got as u128, expected, "policy {}", policy.name);
        }
    }

    /// Storing the shared context once can only help capacity: reuse
    /// policies admit at least the replicated batch, strictly more once the
    /// shared context dominates a request's footprint.
    #[test]
    fn reuse_never_reduces_the_batch_limit(workload in workload_strategy()) {
        let cfg = default_config();
        let replicated = max_batch(&by_name("FlashAttention"), &workload, &cfg.model, &cfg.hardware);
        let reused = max_batch(&by_name("MoSKA"), &workload, &cfg.model, &cfg.hardware);
        prop_assert!(reused >= replicated);
        // Routing and batching do not change what is stored.
        for name in ["SGLang", "ChunkAttention"] {
            prop_assert_eq!(max_batch(&by_name(name), &workload, &cfg.model, &cfg.hardware), reused);
        }
        prop_assert_eq!(
            max_batch(&by_name("LongHeads"), &workload, &cfg.model, &cfg.hardware),
            replicated
        );
    }

    /// Longer shared contexts never admit larger batches.
    #[test]
    fn batch_limit_is_non_increasing_in_shared_length(
        workload in workload_strategy(),
        growth in 2u64..=64,
    ) {
        let cfg = default_config();
        let longer = workload.with_shared_len(workload.shared_len * growth);
        for policy in ladder() {
            let near = max_batch(&policy, &workload, &cfg.model, &cfg.hardware);
            let far = max_batch(&policy, &longer, &cfg.model, &cfg.hardware);
            prop_assert!(far <= near, "policy {}: {far} > {near}", policy.name);
        }
    }

    /// The shared read is constant in batch under a batched GEMM and exactly
    /// linear when each request streams its own copy.
    #[test]
    fn shared_bytes_dichotomy(
        workload in workload_strategy(),
        batch in 1u64..=512,
    ) {
        let model = ModelSpec::default();
        let base = step_stats(&by_name("ChunkAttention"), &workload, &model, 1)[1];
        let batched = step_stats(&by_name("ChunkAttention"), &workload, &model, batch)[1];
        let replicated = step_stats(&by_name("SGLang"), &workload, &model, batch)[1];
        prop_assert_eq!(batched.bytes_read, base.bytes_read);
        prop_assert_eq!(replicated.bytes_read, base.bytes_read * batch as f64);
        // FLOPs are shape-independent: both evaluate the same math.
        prop_assert_eq!(batched.flops, replicated.flops);
    }

    /// Every roofline component is bounded by whichever ceiling binds, and
    /// perfect overlap can only shorten the step.
    #[test]
    fn component_times_respect_the_roofline(
        workload in workload_strategy(),
        batch in 1u64..=512,
    ) {
        let cfg = default_config();
        for policy in ladder() {
            let profile = attention_times(&policy, &workload, &cfg.model, &cfg.hardware, batch);
            for c in &profile.components {
                prop_assert!(c.time >= c.bandwidth_time && c.time >= c.compute_time);
                prop_assert!(c.time == c.bandwidth_time || c.time == c.compute_time);
            }
            let serial = profile.latency(OverlapModel::Sum);
            let overlapped = profile.latency(OverlapModel::Max);
            prop_assert!(overlapped <= serial);
            for c in &profile.components {
                prop_assert!(overlapped >= c.time);
            }
        }
    }

    /// Each mechanism removes work, so per-token latency descends the
    /// ladder at any fixed batch.
    #[test]
    fn latency_descends_the_policy_ladder(
        workload in workload_strategy(),
        batch in 1u64..=512,
    ) {
        let cfg = default_config();
        let latency = |name: &str| {
            attention_times(&by_name(name), &workload, &cfg.model, &cfg.hardware, batch)
                .latency(OverlapModel::Sum)
        };
        let flash = latency("FlashAttention");
        // Reuse alone changes storage, not movement.
        prop_assert_eq!(latency("SGLang"), flash);
        prop_assert!(latency("ChunkAttention") <= flash);
        prop_assert!(latency("LongHeads") <= flash);
        prop_assert!(latency("MoSKA") <= latency("ChunkAttention"));
        prop_assert!(latency("MoSKA") <= latency("LongHeads"));
    }

    /// Batching multiplies shared-attention FLOPs but not bytes, so the
    /// component's arithmetic intensity grows with the batch.
    #[test]
    fn batched_shared_intensity_grows_with_batch(
        workload in workload_strategy(),
        batch in 1u64..=256,
    ) {
        let model = ModelSpec::default();
        let policy = by_name("ChunkAttention");
        let now = step_stats(&policy, &workload, &model, batch)[1];
        let doubled = step_stats(&policy, &workload, &model, batch * 2)[1];
        let a = now.arithmetic_intensity().unwrap();
        let b = doubled.arithmetic_intensity().unwrap();
        prop_assert!((b / a - 2.0).abs() < 1e-12, "intensity {a} -> {b}");
    }

    /// Sweep output is well-formed: batches respect the limit, each shared
    /// length contributes exactly one summary row, and the baseline policy
    /// normalizes to exactly 1.
    #[test]
    fn sweep_rows_are_well_formed(workload in workload_strategy(), seed in any::<u64>()) {
        let cfg = default_config();
        let opts = ModelOptions {
            slo_cap: seed % 2 == 0,
            overlap: if seed % 4 < 2 { OverlapModel::Sum } else { OverlapModel::Max },
        };
        for policy in ladder() {
            let rows = throughput(&policy, &workload, &cfg.model, &cfg.hardware, &opts);
            let summaries = rows.iter().filter(|r| r.kind == RowKind::MaxBatch).count();
            prop_assert_eq!(summaries, workload.shared_lens.len());
            for row in &rows {
                prop_assert!(row.batch <= row.max_batch);
                prop_assert!(row.system_throughput.is_finite());
                if policy.name == "FlashAttention" && row.batch > 0 {
                    prop_assert_eq!(row.normalized_throughput, 1.0);
                }
                if row.batch > 0 {
                    prop_assert!(row.normalized_throughput >= 1.0 - 1e-12,
                        "{} at batch {}", policy.name, row.batch);
                }
            }
        }
    }
}

#[test]
fn unique_attention_cost_is_policy_independent() {
    let cfg = default_config();
    let reference = step_stats(
        &by_name("FlashAttention"),
        &cfg.workload,
        &cfg.model,
        64,
    )[0];
    for policy in ladder() {
        let got = step_stats(&policy, &cfg.workload, &cfg.model, 64)[0];
        assert_eq!(got.category, OpCategory::UniqueAttention);
        assert_eq!(got.flops, reference.flops, "policy {}", policy.name);
        assert_eq!(got.bytes_read, reference.bytes_read, "policy {}", policy.name);
    }
}
