//! Exact attention kernels over chunked KV stores.
//!
//! Decode-time attention is computed in double precision with the online
//! softmax decomposition: attending to a chunk yields a [`PartialAttention`]
//! state `(acc, m, s)` — the unnormalized value accumulator, the running
//! max logit, and the running softmax denominator. Partials over disjoint
//! chunks merge associatively, so a long context can be scored chunk by
//! chunk and combined in any grouping; finalizing divides `acc / s`.
//!
//! Two evaluation shapes are provided for the shared store:
//!
//! * [`attend_chunk`] — one query against one chunk (a pair of GEMVs);
//! * [`batched_shared_attention`] — all co-batched queries against one
//!   chunk as two matrix-matrix products (`scores = scale * Q * K^T`, then
//!   `acc = weights * V`). Every output row is computed by the same scalar
//!   kernels in the same order as the single-query path, so row `i` equals
//!   `attend_chunk(q_i, chunk)` bit for bit.
//!
//! [`full_attention`] is the deliberately boring reference: one monolithic
//! softmax over the whole context, used as the oracle in equivalence tests.

use crate::config::PolicySpec;
use crate::perf::{OpCategory, OpStats};
use crate::router::{Router, RouterError};
use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AttentionError {
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("chunk {chunk_id} is empty; chunks must hold at least one token")]
    EmptyChunk { chunk_id: usize },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("query {query} attends to nothing (empty unique store and no shared chunks)")]
    EmptyAttention { query: usize },
    #[error("cannot finalize an attention state that has seen no keys")]
    EmptyState,
    #[error("policy `{policy}` and router disagree: sparse_routing={sparse_routing} but a router {router_state}")]
    RouterPolicyMismatch {
        policy: String,
        sparse_routing: bool,
        router_state: &'static str,
    },
    #[error("shared chunk ids must be dense and ascending from 0 (found id {found} at position {position})")]
    NonDenseChunkIds { found: usize, position: usize },
    #[error(transparent)]
    Router(#[from] RouterError),
}

/// The conventional softmax temperature for `head_dim`-wide attention.
pub fn default_scale(head_dim: usize) -> f64 {
    1.0 / (head_dim as f64).sqrt()
}

/// Sequential dot product. All score computations go through this one kernel
/// so that batched and single-query evaluation accumulate in the same order.
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

fn row<'a>(m: &ArrayView2<'a, f64>, i: usize) -> &'a [f64] {
    m.to_slice()
        .map(|flat| &flat[i * m.ncols()..(i + 1) * m.ncols()])
        .expect("matrices are standard layout")
}

fn all_finite(m: &ArrayView2<f64>) -> bool {
    m.iter().all(|x| x.is_finite())
}

/// One contiguous span of the shared context: `chunk_len x head_dim` key and
/// value matrices plus the routing embedding derived from the keys.
#[derive(Debug, Clone)]
pub struct KVChunk {
    pub chunk_id: usize,
    pub keys: Array2<f64>,
    pub values: Array2<f64>,
    /// Mean of the key rows (see [`key_mean`]); routers score queries
    /// against this without touching the full chunk.
    pub embedding: Array1<f64>,
}

impl KVChunk {
    pub fn new(
        chunk_id: usize,
        keys: Array2<f64>,
        values: Array2<f64>,
    ) -> Result<Self, AttentionError> {
        if keys.nrows() == 0 {
            return Err(AttentionError::EmptyChunk { chunk_id });
        }
        if keys.dim() != values.dim() {
            return Err(AttentionError::DimensionMismatch {
                what: "chunk values",
                expected: keys.nrows() * keys.ncols(),
                got: values.nrows() * values.ncols(),
            });
        }
        if !all_finite(&keys.view()) || !all_finite(&values.view()) {
            return Err(AttentionError::NonFinite("chunk keys/values"));
        }
        let embedding = key_mean(keys.view());
        Ok(Self {
            chunk_id,
            keys,
            values,
            embedding,
        })
    }

    pub fn len(&self) -> usize {
        self.keys.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn head_dim(&self) -> usize {
        self.keys.ncols()
    }
}

/// The normative chunk embedding: the arithmetic mean of the key rows,
/// accumulated in ascending token order. Callers in other languages can
/// reproduce it as `sum(keys[i]) / n` with a plain sequential sum.
pub fn key_mean(keys: ArrayView2<f64>) -> Array1<f64> {
    let mut acc = vec![0.0; keys.ncols()];
    for i in 0..keys.nrows() {
        for (a, k) in acc.iter_mut().zip(row(&keys, i)) {
            *a += k;
        }
    }
    let n = keys.nrows() as f64;
    Array1::from_iter(acc.into_iter().map(|a| a / n))
}

/// Online-softmax state: `acc` holds the exp-weighted value sum relative to
/// the running max `m`, and `s` holds the softmax denominator in the same
/// frame. The identity element (`s = 0`, `m = -inf`) merges as a no-op.
#[derive(Debug, Clone)]
pub struct PartialAttention {
    pub acc: Array1<f64>,
    pub m: f64,
    pub s: f64,
}

impl PartialAttention {
    pub fn identity(head_dim: usize) -> Self {
        Self {
            acc: Array1::zeros(head_dim),
            m: f64::NEG_INFINITY,
            s: 0.0,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.acc.len()
    }

    pub fn is_identity(&self) -> bool {
        self.s == 0.0
    }

    /// Normalizes to the attention output. Errors on the identity state —
    /// a query that attended to nothing has no meaningful output.
    pub fn finalize(&self) -> Result<Array1<f64>, AttentionError> {
        if self.s == 0.0 {
            return Err(AttentionError::EmptyState);
        }
        Ok(self.acc.mapv(|a| a / self.s))
    }
}

fn partial_from_logits(logits: &[f64], values: &ArrayView2<f64>) -> PartialAttention {
    let m = logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let mut s = 0.0;
    let mut acc = vec![0.0; values.ncols()];
    for (i, &logit) in logits.iter().enumerate() {
        let w = (logit - m).exp();
        s += w;
        for (a, v) in acc.iter_mut().zip(row(values, i)) {
            *a += w * v;
        }
    }
    PartialAttention {
        acc: Array1::from_vec(acc),
        m,
        s,
    }
}

fn check_query(q: &ArrayView1<f64>, head_dim: usize) -> Result<(), AttentionError> {
    if q.len() != head_dim {
        return Err(AttentionError::DimensionMismatch {
            what: "query width",
            expected: head_dim,
            got: q.len(),
        });
    }
    if !q.iter().all(|x| x.is_finite()) {
        return Err(AttentionError::NonFinite("query"));
    }
    Ok(())
}

/// One query against one raw KV store (the per-request unique context or a
/// single shared chunk): logits are `scale * q . k_i`, reduced to a partial
/// state. GEMV-shaped: the store is traversed once for this query alone.
pub fn attend_kv(
    q: ArrayView1<f64>,
    keys: ArrayView2<f64>,
    values: ArrayView2<f64>,
    scale: f64,
) -> Result<PartialAttention, AttentionError> {
    check_query(&q, keys.ncols())?;
    if keys.dim() != values.dim() {
        return Err(AttentionError::DimensionMismatch {
            what: "values",
            expected: keys.nrows(),
            got: values.nrows(),
        });
    }
    if keys.nrows() == 0 {
        return Ok(PartialAttention::identity(keys.ncols()));
    }
    let qs = q.to_slice().expect("queries are contiguous");
    let logits: Vec<f64> = (0..keys.nrows())
        .map(|i| scale * dot(qs, row(&keys, i)))
        .collect();
    Ok(partial_from_logits(&logits, &values))
}

/// [`attend_kv`] over a shared chunk.
pub fn attend_chunk(
    q: ArrayView1<f64>,
    chunk: &KVChunk,
    scale: f64,
) -> Result<PartialAttention, AttentionError> {
    attend_kv(q, chunk.keys.view(), chunk.values.view(), scale)
}

/// Merges partial states from two disjoint key sets: rebase both onto the
/// larger max, then add denominators and accumulators. Exactly commutative
/// when the two maxes are equal; associative up to rounding otherwise.
pub fn merge_partials(
    a: &PartialAttention,
    b: &PartialAttention,
) -> Result<PartialAttention, AttentionError> {
    if a.head_dim() != b.head_dim() {
        return Err(AttentionError::DimensionMismatch {
            what: "merged partials",
            expected: a.head_dim(),
            got: b.head_dim(),
        });
    }
    // The identity state carries m = -inf; short-circuit rather than evaluate
    // exp(-inf - -inf).
    if a.is_identity() {
        return Ok(b.clone());
    }
    if b.is_identity() {
        return Ok(a.clone());
    }
    let m = a.m.max(b.m);
    let wa = (a.m - m).exp();
    let wb = (b.m - m).exp();
    let mut acc = Array1::zeros(a.head_dim());
    for (out, (x, y)) in acc.iter_mut().zip(a.acc.iter().zip(b.acc.iter())) {
        *out = x * wa + y * wb;
    }
    Ok(PartialAttention {
        acc,
        m,
        s: a.s * wa + b.s * wb,
    })
}

/// Monolithic reference attention: one softmax over the whole store, no
/// partial states, normalization applied per weight. This is the oracle the
/// chunked/merged path is validated against.
pub fn full_attention(
    q: ArrayView1<f64>,
    keys: ArrayView2<f64>,
    values: ArrayView2<f64>,
    scale: f64,
) -> Result<Array1<f64>, AttentionError> {
    check_query(&q, keys.ncols())?;
    if keys.nrows() == 0 {
        return Err(AttentionError::EmptyState);
    }
    if keys.dim() != values.dim() {
        return Err(AttentionError::DimensionMismatch {
            what: "values",
            expected: keys.nrows(),
            got: values.nrows(),
        });
    }
    let qs = q.to_slice().expect("queries are contiguous");
    let logits: Vec<f64> = (0..keys.nrows())
        .map(|i| scale * dot(qs, row(&keys, i)))
        .collect();
    let m = logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let denom: f64 = logits.iter().map(|&l| (l - m).exp()).sum();
    let mut out = vec![0.0; values.ncols()];
    for (i, &logit) in logits.iter().enumerate() {
        let w = (logit - m).exp() / denom;
        for (o, v) in out.iter_mut().zip(row(&values.view(), i)) {
            *o += w * v;
        }
    }
    Ok(Array1::from_vec(out))
}

/// Evaluates every query row against one shared chunk as two matrix-matrix
/// products: the score matrix `scale * Q * K^T` is materialized first, then
/// each weight row is contracted against `V`. This is the arithmetic shape
/// that turns per-request GEMVs into one shared GEMM; output row `i` is
/// bitwise identical to `attend_chunk(queries.row(i), chunk, scale)`.
pub fn batched_shared_attention(
    queries: ArrayView2<f64>,
    chunk: &KVChunk,
    scale: f64,
) -> Result<Vec<PartialAttention>, AttentionError> {
    if queries.ncols() != chunk.head_dim() {
        return Err(AttentionError::DimensionMismatch {
            what: "batched query width",
            expected: chunk.head_dim(),
            got: queries.ncols(),
        });
    }
    if !all_finite(&queries) {
        return Err(AttentionError::NonFinite("batched queries"));
    }
    let n = queries.nrows();
    let len = chunk.len();
    // First product: scores[i][j] = scale * q_i . k_j.
    let mut scores = Array2::zeros((n, len));
    for i in 0..n {
        let qs = row(&queries, i);
        for j in 0..len {
            scores[[i, j]] = scale * dot(qs, row(&chunk.keys.view(), j));
        }
    }
    // Second product: each exp-weight row against V, folded into partials.
    let values = chunk.values.view();
    let partials = (0..n)
        .map(|i| {
            let logits = row(&scores.view(), i);
            partial_from_logits(logits, &values)
        })
        .collect();
    Ok(partials)
}

/// Everything one decode step produced: an output row per query plus the
/// operation accounting split into unique-store and shared-store work.
#[derive(Debug, Clone)]
pub struct DecodeOutput {
    pub outputs: Array2<f64>,
    pub unique_stats: OpStats,
    pub shared_stats: OpStats,
    /// Chunk ids each query attended to, ascending (the merge fold order).
    pub selections: Vec<Vec<usize>>,
}

/// Runs one decode step for a batch of requests under `policy`:
///
/// 1. if the policy routes, select top-k shared chunks per query;
/// 2. score the shared chunks — batched per chunk when the policy batches,
///    per (query, chunk) GEMV otherwise;
/// 3. score each request's unique store;
/// 4. fold each query's shared partials in ascending chunk id, merge the
///    unique partial in, and finalize.
///
/// Byte accounting mirrors the evaluation shape: a batched chunk is read
/// once for all queries that selected it, an unbatched chunk once per
/// selecting query. Counts are in f64 storage (8 bytes per element).
pub fn decode_step(
    queries: ArrayView2<f64>,
    unique_stores: &[(Array2<f64>, Array2<f64>)],
    shared_chunks: &[KVChunk],
    router: Option<&Router>,
    policy: &PolicySpec,
    scale: f64,
) -> Result<DecodeOutput, AttentionError> {
    let n = queries.nrows();
    let d = queries.ncols();
    if unique_stores.len() != n {
        return Err(AttentionError::DimensionMismatch {
            what: "unique stores per query",
            expected: n,
            got: unique_stores.len(),
        });
    }
    if !all_finite(&queries) {
        return Err(AttentionError::NonFinite("queries"));
    }
    if policy.sparse_routing != router.is_some() {
        return Err(AttentionError::RouterPolicyMismatch {
            policy: policy.name.clone(),
            sparse_routing: policy.sparse_routing,
            router_state: if router.is_some() {
                "was provided"
            } else {
                "was not provided"
            },
        });
    }
    for (position, chunk) in shared_chunks.iter().enumerate() {
        if chunk.chunk_id != position {
            return Err(AttentionError::NonDenseChunkIds {
                found: chunk.chunk_id,
                position,
            });
        }
        if chunk.head_dim() != d {
            return Err(AttentionError::DimensionMismatch {
                what: "chunk width",
                expected: d,
                got: chunk.head_dim(),
            });
        }
    }

    // Per-query selected chunk ids, ascending; routing decides, otherwise
    // every chunk is selected.
    let mut selections: Vec<Vec<usize>> = Vec::with_capacity(n);
    for i in 0..n {
        let mut selected: Vec<usize> = match router {
            Some(router) if !shared_chunks.is_empty() => {
                router.route(queries.row(i))?.selected
            }
            _ => (0..shared_chunks.len()).collect(),
        };
        selected.sort_unstable();
        selections.push(selected);
    }

    let elem_bytes = std::mem::size_of::<f64>() as f64;
    let mut unique_stats = OpStats::zero(OpCategory::UniqueAttention);
    let mut shared_stats = OpStats::zero(OpCategory::SharedAttention);

    // Shared partials per query, in fold (ascending chunk id) order.
    let mut shared_partials: Vec<Vec<PartialAttention>> = vec![Vec::new(); n];
    if policy.shared_batched_gemm {
        // Queries selecting each chunk, ascending query index.
        let mut rows_by_chunk: Vec<Vec<usize>> = vec![Vec::new(); shared_chunks.len()];
        for (qi, selected) in selections.iter().enumerate() {
            for &c in selected {
                rows_by_chunk[c].push(qi);
            }
        }
        for (c, rows) in rows_by_chunk.iter().enumerate() {
            if rows.is_empty() {
                continue;
            }
            let chunk = &shared_chunks[c];
            let mut sub = Array2::zeros((rows.len(), d));
            for (r, &qi) in rows.iter().enumerate() {
                sub.row_mut(r).assign(&queries.row(qi));
            }
            let partials = batched_shared_attention(sub.view(), chunk, scale)?;
            for (partial, &qi) in partials.into_iter().zip(rows) {
                shared_partials[qi].push(partial);
            }
            let len = chunk.len() as f64;
            shared_stats.flops += 4.0 * rows.len() as f64 * len * d as f64;
            // One pass over the chunk's K and V for the whole sub-batch.
            shared_stats.bytes_read += 2.0 * len * d as f64 * elem_bytes;
        }
    } else {
        for (qi, selected) in selections.iter().enumerate() {
            for &c in selected {
                let chunk = &shared_chunks[c];
                shared_partials[qi].push(attend_chunk(queries.row(qi), chunk, scale)?);
                let len = chunk.len() as f64;
                shared_stats.flops += 4.0 * len * d as f64;
                shared_stats.bytes_read += 2.0 * len * d as f64 * elem_bytes;
            }
        }
    }

    let mut outputs = Array2::zeros((n, d));
    for qi in 0..n {
        let (keys, values) = &unique_stores[qi];
        if keys.ncols() != d && keys.nrows() > 0 {
            return Err(AttentionError::DimensionMismatch {
                what: "unique store width",
                expected: d,
                got: keys.ncols(),
            });
        }
        if !all_finite(&keys.view()) || !all_finite(&values.view()) {
            return Err(AttentionError::NonFinite("unique store"));
        }
        let unique = attend_kv(queries.row(qi), keys.view(), values.view(), scale)?;
        if !unique.is_identity() {
            let len = keys.nrows() as f64;
            unique_stats.flops += 4.0 * len * d as f64;
            unique_stats.bytes_read += 2.0 * len * d as f64 * elem_bytes;
        }

        let mut shared_fold = PartialAttention::identity(d);
        for partial in &shared_partials[qi] {
            shared_fold = merge_partials(&shared_fold, partial)?;
        }
        let combined = merge_partials(&unique, &shared_fold)?;
        let out = combined
            .finalize()
            .map_err(|_| AttentionError::EmptyAttention { query: qi })?;
        outputs.row_mut(qi).assign(&out);
    }

    Ok(DecodeOutput {
        outputs,
        unique_stats,
        shared_stats,
        selections,
    })
}

/// Largest relative elementwise deviation between two vectors, using the
/// larger magnitude in each pair as the scale (with a floor so comparisons
/// against exact zeros stay meaningful).
pub fn relative_deviation(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    assert_eq!(a.len(), b.len(), "relative_deviation over equal lengths");
    let scale = a
        .iter()
        .chain(b.iter())
        .fold(0.0f64, |acc, &x| acc.max(x.abs()))
        .max(f64::MIN_POSITIVE);
    a.iter()
        .zip(b.iter())
        .fold(0.0f64, |acc, (&x, &y)| acc.max((x - y).abs() / scale))
}
