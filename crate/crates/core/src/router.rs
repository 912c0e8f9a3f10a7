//! Top-k routing of queries to shared-KV chunks.
//!
//! Instead of attending to every chunk of a long shared context, a query can
//! be routed to the chunks most likely to matter: each chunk is summarized by
//! the mean of its key rows, the query is scored against every summary with a
//! dot product, and only the k best-scoring chunks are attended. Ties break
//! toward the lower chunk id, so routing is a pure function of its inputs.

use crate::attention::{key_mean, KVChunk};
use crate::config::WorkloadSpec;
use ndarray::{Array1, ArrayView1};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RouterError {
    #[error("router index must not be empty")]
    EmptyIndex,
    #[error("top-k must be at least 1")]
    InvalidK,
    #[error("chunk index ids must be dense and ascending from 0 (found id {found} at position {position})")]
    NonDenseIds { found: usize, position: usize },
    #[error("query width {got} does not match index embedding width {expected}")]
    WidthMismatch { expected: usize, got: usize },
    #[error("routing produced a non-finite score for chunk {chunk_id}")]
    NonFiniteScore { chunk_id: usize },
}

/// One routable chunk: its id and key-mean embedding.
#[derive(Debug, Clone)]
pub struct ChunkIndexEntry {
    pub chunk_id: usize,
    pub embedding: Array1<f64>,
}

/// The outcome of routing one query: selected chunk ids in score order
/// (best first), with their scores.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingDecision {
    /// Selected chunk ids, ordered by descending score; ties ordered by
    /// ascending chunk id. Never contains duplicates.
    pub selected: Vec<usize>,
    /// Scores parallel to `selected` (non-increasing).
    pub scores: Vec<f64>,
}

/// The routing embedding of a chunk — identical to the `embedding` computed
/// at chunk construction.
pub fn chunk_embedding(chunk: &KVChunk) -> Array1<f64> {
    key_mean(chunk.keys.view())
}

/// Routes `q` against `index`, selecting `min(k, index.len())` chunks.
pub fn route(
    q: ArrayView1<f64>,
    index: &[ChunkIndexEntry],
    k: usize,
) -> Result<RoutingDecision, RouterError> {
    if index.is_empty() {
        return Err(RouterError::EmptyIndex);
    }
    if k == 0 {
        return Err(RouterError::InvalidK);
    }
    let width = index[0].embedding.len();
    if q.len() != width {
        return Err(RouterError::WidthMismatch {
            expected: width,
            got: q.len(),
        });
    }
    let qs = q.to_slice().expect("queries are contiguous");
    let mut scored: Vec<(usize, f64)> = Vec::with_capacity(index.len());
    for entry in index {
        let emb = entry
            .embedding
            .as_slice()
            .expect("embeddings are contiguous");
        let score = crate::attention::dot(qs, emb);
        if !score.is_finite() {
            return Err(RouterError::NonFiniteScore {
                chunk_id: entry.chunk_id,
            });
        }
        scored.push((entry.chunk_id, score));
    }
    // Descending score, ascending id on ties. Scores are finite, so the
    // comparison is total.
    scored.sort_unstable_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .expect("scores are finite")
            .then(a.0.cmp(&b.0))
    });
    scored.truncate(k.min(index.len()));
    Ok(RoutingDecision {
        selected: scored.iter().map(|&(id, _)| id).collect(),
        scores: scored.iter().map(|&(_, s)| s).collect(),
    })
}

/// A built routing index with a fixed top-k, ready to route many queries.
#[derive(Debug, Clone)]
pub struct Router {
    entries: Vec<ChunkIndexEntry>,
    k: usize,
}

impl Router {
    pub fn new(chunks: &[KVChunk], k: usize) -> Result<Self, RouterError> {
        if chunks.is_empty() {
            return Err(RouterError::EmptyIndex);
        }
        if k == 0 {
            return Err(RouterError::InvalidK);
        }
        let mut entries = Vec::with_capacity(chunks.len());
        for (position, chunk) in chunks.iter().enumerate() {
            if chunk.chunk_id != position {
                return Err(RouterError::NonDenseIds {
                    found: chunk.chunk_id,
                    position,
                });
            }
            entries.push(ChunkIndexEntry {
                chunk_id: chunk.chunk_id,
                embedding: chunk.embedding.clone(),
            });
        }
        Ok(Self { entries, k })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn num_chunks(&self) -> usize {
        self.entries.len()
    }

    pub fn entries(&self) -> &[ChunkIndexEntry] {
        &self.entries
    }

    pub fn route(&self, q: ArrayView1<f64>) -> Result<RoutingDecision, RouterError> {
        route(q, &self.entries, self.k)
    }
}

/// Top-k implied by a workload: the un-skipped fraction of the shared
/// context, in chunks, rounded up — at least one chunk.
pub fn derive_k(workload: &WorkloadSpec) -> u64 {
    let num_chunks = workload.num_chunks();
    let kept = ((1.0 - workload.sparsity) * num_chunks as f64).ceil() as u64;
    kept.clamp(1, num_chunks.max(1))
}
