//! Randomized self-verification of the numeric pipeline.
//!
//! Seven properties cover the pipeline's load-bearing claims: chunked scans
//! and partial merges against the monolithic softmax, bit equality of the
//! batched shared path, routing against a brute-force oracle, and full
//! decode against attention over the concatenated context. Case shapes are
//! drawn log-uniformly at desk scale — chunks up to 512 tokens, up to 64
//! queries — so small and large cases get comparable coverage. Every case
//! derives deterministically from the run seed, and a failure names the
//! property and the case seed that produced it.

use ndarray::{s, Array2};
use skva_core::attention::{
    attend_chunk, attend_kv, batched_shared_attention, decode_step, default_scale,
    full_attention, merge_partials, relative_deviation, KVChunk, PartialAttention,
};
use skva_core::config::PolicySpec;
use skva_core::gen::{gen_matrix, gen_synthetic, SplitMix64};
use skva_core::router::Router;

const TOL_MONOLITHIC: f64 = 1e-9;
const TOL_MERGE: f64 = 1e-12;

/// Deliberate corruption switches for exercising the failure path. The
/// harness must be able to fail; this proves it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// Negate the accumulator after every harness-level merge.
    MergeSign,
}

impl std::str::FromStr for Fault {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "merge-sign" => Ok(Fault::MergeSign),
            other => Err(format!("unknown fault `{other}` (expected merge-sign)")),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct VerifyOptions {
    pub seed: u64,
    pub cases: u64,
    pub fault: Option<Fault>,
}

#[derive(Debug, Clone)]
pub struct CaseFailure {
    pub case: u64,
    pub case_seed: u64,
    pub message: String,
}

#[derive(Debug, Clone)]
pub struct PropertyOutcome {
    pub name: &'static str,
    /// Cases executed (short of the request only when one failed).
    pub cases: u64,
    /// Worst relative deviation seen; stays 0 for exact-equality properties.
    pub worst: f64,
    /// The acceptance bound, `None` for exact/bitwise properties.
    pub tolerance: Option<f64>,
    pub failure: Option<CaseFailure>,
}

/// One routing decision recorded for `--trace`.
#[derive(Debug, Clone)]
pub struct TraceRow {
    pub case: u64,
    pub case_seed: u64,
    pub num_chunks: usize,
    pub k: usize,
    pub selected: Vec<usize>,
    pub scores: Vec<f64>,
}

/// Integer drawn so the *magnitude* is uniform: small shapes appear as
/// often as large ones instead of being crowded out.
fn log_uniform(rng: &mut SplitMix64, lo: usize, hi: usize) -> usize {
    assert!(0 < lo && lo <= hi);
    let lo_bits = usize::BITS - lo.leading_zeros();
    let hi_bits = usize::BITS - hi.leading_zeros();
    let bits = rng.next_range(lo_bits as usize, hi_bits as usize);
    let low = (1usize << (bits - 1)).max(lo);
    let high = ((1usize << bits) - 1).min(hi);
    rng.next_range(low, high)
}

/// Harness-level merge: the injection point for [`Fault::MergeSign`].
fn merge(a: &PartialAttention, b: &PartialAttention, fault: Option<Fault>) -> PartialAttention {
    let mut out = merge_partials(a, b).expect("harness merges equal widths");
    if fault == Some(Fault::MergeSign) {
        out.acc.mapv_inplace(|x| -x);
    }
    out
}

fn fold(parts: &[PartialAttention], d: usize, fault: Option<Fault>) -> PartialAttention {
    parts
        .iter()
        .fold(PartialAttention::identity(d), |acc, p| merge(&acc, p, fault))
}

fn split_chunks(keys: &Array2<f64>, values: &Array2<f64>, chunk_len: usize) -> Vec<KVChunk> {
    let n = keys.nrows();
    (0..n.div_ceil(chunk_len))
        .map(|i| {
            let lo = i * chunk_len;
            let hi = (lo + chunk_len).min(n);
            KVChunk::new(
                i,
                keys.slice(s![lo..hi, ..]).to_owned(),
                values.slice(s![lo..hi, ..]).to_owned(),
            )
            .expect("nonempty finite slice")
        })
        .collect()
}

fn check_tolerance(dev: f64, tol: f64, what: &str) -> Result<f64, String> {
    if dev > tol {
        Err(format!("{what}: deviation {dev:.3e} exceeds {tol:.0e}"))
    } else {
        Ok(dev)
    }
}

/// Chunked scan + merge against the monolithic softmax.
fn chunked_merge_equivalence(case_seed: u64, fault: Option<Fault>) -> Result<f64, String> {
    let mut rng = SplitMix64::new(case_seed);
    let n = log_uniform(&mut rng, 1, 512);
    let d = log_uniform(&mut rng, 4, 128);
    let chunk_len = log_uniform(&mut rng, 1, n);
    let (keys, values) = gen_synthetic(rng.next_u64(), n, d);
    let q = gen_matrix(rng.next_u64(), 1, d);
    let scale = default_scale(d);

    let whole = full_attention(q.row(0), keys.view(), values.view(), scale)
        .map_err(|e| e.to_string())?;
    let parts: Vec<PartialAttention> = split_chunks(&keys, &values, chunk_len)
        .iter()
        .map(|c| attend_chunk(q.row(0), c, scale).expect("valid chunk"))
        .collect();
    let merged = fold(&parts, d, fault)
        .finalize()
        .map_err(|e| e.to_string())?;

    let dev = relative_deviation(merged.view(), whole.view());
    check_tolerance(dev, TOL_MONOLITHIC, "chunked scan vs monolithic")
}

/// Both parenthesizations of a three-way merge agree.
fn merge_associativity(case_seed: u64, fault: Option<Fault>) -> Result<f64, String> {
    let mut rng = SplitMix64::new(case_seed);
    let d = log_uniform(&mut rng, 4, 128);
    let q = gen_matrix(rng.next_u64(), 1, d);
    let scale = default_scale(d);
    let parts: Vec<PartialAttention> = (0..3)
        .map(|_| {
            let len = log_uniform(&mut rng, 1, 256);
            let (keys, values) = gen_synthetic(rng.next_u64(), len, d);
            attend_kv(q.row(0), keys.view(), values.view(), scale).expect("valid store")
        })
        .collect();

    let left = merge(&merge(&parts[0], &parts[1], fault), &parts[2], fault)
        .finalize()
        .map_err(|e| e.to_string())?;
    let right = merge(&parts[0], &merge(&parts[1], &parts[2], fault), fault)
        .finalize()
        .map_err(|e| e.to_string())?;

    let dev = relative_deviation(left.view(), right.view());
    check_tolerance(dev, TOL_MERGE, "merge associativity")
}

/// Fold order over chunk partials does not matter.
fn merge_permutation_invariance(case_seed: u64, fault: Option<Fault>) -> Result<f64, String> {
    let mut rng = SplitMix64::new(case_seed);
    let d = log_uniform(&mut rng, 4, 64);
    let n = log_uniform(&mut rng, 2, 512);
    let chunk_len = log_uniform(&mut rng, 1, n.div_ceil(2));
    let (keys, values) = gen_synthetic(rng.next_u64(), n, d);
    let q = gen_matrix(rng.next_u64(), 1, d);
    let scale = default_scale(d);

    let mut parts: Vec<PartialAttention> = split_chunks(&keys, &values, chunk_len)
        .iter()
        .map(|c| attend_chunk(q.row(0), c, scale).expect("valid chunk"))
        .collect();
    let ordered = fold(&parts, d, fault).finalize().map_err(|e| e.to_string())?;

    for i in (1..parts.len()).rev() {
        let j = rng.next_index(i + 1);
        parts.swap(i, j);
    }
    let shuffled = fold(&parts, d, fault).finalize().map_err(|e| e.to_string())?;

    let dev = relative_deviation(shuffled.view(), ordered.view());
    check_tolerance(dev, TOL_MERGE, "merge permutation invariance")
}

/// The batched shared product reproduces the one-query path bit for bit.
fn batched_gemm_bit_equality(case_seed: u64, _fault: Option<Fault>) -> Result<f64, String> {
    let mut rng = SplitMix64::new(case_seed);
    let n_queries = log_uniform(&mut rng, 1, 64);
    let chunk_len = log_uniform(&mut rng, 1, 512);
    let d = log_uniform(&mut rng, 4, 128);
    let (keys, values) = gen_synthetic(rng.next_u64(), chunk_len, d);
    let chunk = KVChunk::new(0, keys, values).expect("valid chunk");
    let queries = gen_matrix(rng.next_u64(), n_queries, d);
    let scale = default_scale(d);

    let batched =
        batched_shared_attention(queries.view(), &chunk, scale).map_err(|e| e.to_string())?;
    for (i, got) in batched.iter().enumerate() {
        let want = attend_chunk(queries.row(i), &chunk, scale).expect("valid chunk");
        if got.acc != want.acc || got.m != want.m || got.s != want.s {
            return Err(format!("row {i} differs in bits from the single-query path"));
        }
    }
    Ok(0.0)
}

fn oracle_top_k(q: &Array2<f64>, router: &Router, k: usize) -> Vec<usize> {
    let mut scored: Vec<(usize, f64)> = router
        .entries()
        .iter()
        .map(|e| {
            let score = q
                .row(0)
                .iter()
                .zip(e.embedding.iter())
                .map(|(a, b)| a * b)
                .sum();
            (e.chunk_id, score)
        })
        .collect();
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    scored.truncate(k);
    scored.into_iter().map(|(id, _)| id).collect()
}

/// Top-k routing against exhaustive scoring and sorting.
fn routing_topk_oracle(
    case: u64,
    case_seed: u64,
    trace: &mut Vec<TraceRow>,
) -> Result<f64, String> {
    let mut rng = SplitMix64::new(case_seed);
    let num_chunks = log_uniform(&mut rng, 1, 64);
    let d = log_uniform(&mut rng, 4, 128);
    let chunk_len = log_uniform(&mut rng, 1, 64);
    let k = rng.next_range(1, num_chunks);
    let chunks: Vec<KVChunk> = (0..num_chunks)
        .map(|i| {
            let (keys, values) = gen_synthetic(rng.next_u64(), chunk_len, d);
            KVChunk::new(i, keys, values).expect("valid chunk")
        })
        .collect();
    let router = Router::new(&chunks, k).expect("dense ids");
    let q = gen_matrix(rng.next_u64(), 1, d);

    let decision = router.route(q.row(0)).map_err(|e| e.to_string())?;
    let want = oracle_top_k(&q, &router, k);
    trace.push(TraceRow {
        case,
        case_seed,
        num_chunks,
        k,
        selected: decision.selected.clone(),
        scores: decision.scores.clone(),
    });
    if decision.selected != want {
        return Err(format!(
            "selected {:?} but exhaustive sort gives {:?}",
            decision.selected, want
        ));
    }
    Ok(0.0)
}

struct DecodeScenario {
    queries: Array2<f64>,
    stores: Vec<(Array2<f64>, Array2<f64>)>,
    chunks: Vec<KVChunk>,
    scale: f64,
}

fn decode_scenario(rng: &mut SplitMix64) -> DecodeScenario {
    let n_queries = log_uniform(rng, 1, 8);
    let num_chunks = log_uniform(rng, 1, 6);
    let d = log_uniform(rng, 4, 64);
    let chunk_len = log_uniform(rng, 1, 64);
    let chunks = (0..num_chunks)
        .map(|i| {
            let (keys, values) = gen_synthetic(rng.next_u64(), chunk_len, d);
            KVChunk::new(i, keys, values).expect("valid chunk")
        })
        .collect();
    let stores = (0..n_queries)
        .map(|_| {
            let len = rng.next_index(49);
            gen_synthetic(rng.next_u64(), len, d)
        })
        .collect();
    DecodeScenario {
        queries: gen_matrix(rng.next_u64(), n_queries, d),
        stores,
        chunks,
        scale: default_scale(d),
    }
}

/// Routing with k = all chunks decodes bit-identically to not routing.
fn routing_coverage_transparency(case_seed: u64, _fault: Option<Fault>) -> Result<f64, String> {
    let mut rng = SplitMix64::new(case_seed);
    let sc = decode_scenario(&mut rng);
    let batched = rng.next_u64().is_multiple_of(2);
    let router = Router::new(&sc.chunks, sc.chunks.len()).expect("dense ids");

    let routed = decode_step(
        sc.queries.view(),
        &sc.stores,
        &sc.chunks,
        Some(&router),
        &PolicySpec::new("routed", batched, batched, true),
        sc.scale,
    )
    .map_err(|e| e.to_string())?;
    let plain = decode_step(
        sc.queries.view(),
        &sc.stores,
        &sc.chunks,
        None,
        &PolicySpec::new("plain", batched, batched, false),
        sc.scale,
    )
    .map_err(|e| e.to_string())?;

    if routed.outputs != plain.outputs {
        return Err("routed (k = all) and unrouted outputs differ in bits".into());
    }
    Ok(0.0)
}

/// Full decode against monolithic attention over each query's visible
/// context (shared chunks plus its private store).
fn decode_concat_equivalence(case_seed: u64, _fault: Option<Fault>) -> Result<f64, String> {
    let mut rng = SplitMix64::new(case_seed);
    let sc = decode_scenario(&mut rng);
    let d = sc.queries.ncols();
    let out = decode_step(
        sc.queries.view(),
        &sc.stores,
        &sc.chunks,
        None,
        &PolicySpec::new("plain", true, true, false),
        sc.scale,
    )
    .map_err(|e| e.to_string())?;

    let mut worst = 0.0f64;
    for qi in 0..sc.queries.nrows() {
        let shared: usize = sc.chunks.iter().map(|c| c.len()).sum();
        let total = shared + sc.stores[qi].0.nrows();
        let mut keys = Array2::zeros((total, d));
        let mut values = Array2::zeros((total, d));
        let mut at = 0;
        for c in &sc.chunks {
            keys.slice_mut(s![at..at + c.len(), ..]).assign(&c.keys);
            values.slice_mut(s![at..at + c.len(), ..]).assign(&c.values);
            at += c.len();
        }
        keys.slice_mut(s![at.., ..]).assign(&sc.stores[qi].0);
        values.slice_mut(s![at.., ..]).assign(&sc.stores[qi].1);

        let oracle = full_attention(sc.queries.row(qi), keys.view(), values.view(), sc.scale)
            .map_err(|e| e.to_string())?;
        let dev = relative_deviation(out.outputs.row(qi), oracle.view());
        worst = worst.max(check_tolerance(
            dev,
            TOL_MONOLITHIC,
            &format!("decode of query {qi} vs concatenated context"),
        )?);
    }
    Ok(worst)
}

fn run_property(
    name: &'static str,
    tolerance: Option<f64>,
    opts: &VerifyOptions,
    master: &mut SplitMix64,
    mut body: impl FnMut(u64, u64) -> Result<f64, String>,
) -> PropertyOutcome {
    let mut worst = 0.0f64;
    for case in 0..opts.cases {
        let case_seed = master.next_u64();
        match body(case, case_seed) {
            Ok(dev) => worst = worst.max(dev),
            Err(message) => {
                return PropertyOutcome {
                    name,
                    cases: case + 1,
                    worst,
                    tolerance,
                    failure: Some(CaseFailure {
                        case,
                        case_seed,
                        message,
                    }),
                }
            }
        }
    }
    PropertyOutcome {
        name,
        cases: opts.cases,
        worst,
        tolerance,
        failure: None,
    }
}

/// Runs all seven properties. The property list and its order are part of
/// the output contract; the routing trace covers the oracle property's
/// decisions.
pub fn run(opts: &VerifyOptions) -> (Vec<PropertyOutcome>, Vec<TraceRow>) {
    let mut master = SplitMix64::new(opts.seed);
    let mut trace = Vec::new();
    let fault = opts.fault;

    let outcomes = vec![
        run_property(
            "chunked-merge-equivalence",
            Some(TOL_MONOLITHIC),
            opts,
            &mut master,
            |_, seed| chunked_merge_equivalence(seed, fault),
        ),
        run_property(
            "merge-associativity",
            Some(TOL_MERGE),
            opts,
            &mut master,
            |_, seed| merge_associativity(seed, fault),
        ),
        run_property(
            "merge-permutation-invariance",
            Some(TOL_MERGE),
            opts,
            &mut master,
            |_, seed| merge_permutation_invariance(seed, fault),
        ),
        run_property(
            "batched-gemm-bit-equality",
            None,
            opts,
            &mut master,
            |_, seed| batched_gemm_bit_equality(seed, fault),
        ),
        run_property(
            "routing-topk-oracle",
            None,
            opts,
            &mut master,
            |case, seed| routing_topk_oracle(case, seed, &mut trace),
        ),
        run_property(
            "routing-coverage-transparency",
            None,
            opts,
            &mut master,
            |_, seed| routing_coverage_transparency(seed, fault),
        ),
        run_property(
            "decode-concat-equivalence",
            Some(TOL_MONOLITHIC),
            opts,
            &mut master,
            |_, seed| decode_concat_equivalence(seed, fault),
        ),
    ];

    (outcomes, trace)
}
