//! Property tests for chunk routing: selections must match a brute-force
//! oracle, grow monotonically with k, and be invariant to exact rescaling
//! of the query.

use proptest::prelude::*;
use skva_core::attention::KVChunk;
use skva_core::gen::{gen_matrix, gen_synthetic, SplitMix64};
use skva_core::router::{route, ChunkIndexEntry, Router};

fn make_chunks(seed: u64, num_chunks: usize, d: usize) -> Vec<KVChunk> {
    let mut rng = SplitMix64::new(seed);
    let chunk_len = rng.next_range(1, 32);
    (0..num_chunks)
        .map(|i| {
            let (keys, values) = gen_synthetic(rng.next_u64(), chunk_len, d);
            KVChunk::new(i, keys, values).unwrap()
        })
        .collect()
}

/// Reference selection: score every chunk, stable-sort by descending score
/// with ascending id as the tiebreak, take the first k.
fn oracle_top_k(q: &[f64], index: &[ChunkIndexEntry], k: usize) -> Vec<usize> {
    let mut scored: Vec<(usize, f64)> = index
        .iter()
        .map(|e| {
            let score = q.iter().zip(e.embedding.iter()).map(|(a, b)| a * b).sum();
            (e.chunk_id, score)
        })
        .collect();
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    scored.truncate(k.min(index.len()));
    scored.into_iter().map(|(id, _)| id).collect()
}

proptest! {
    #[test]
    fn selection_matches_brute_force_oracle(
        seed in any::<u64>(),
        num_chunks in 1usize..=48,
        d in 1usize..=24,
        k in 1usize..=48,
    ) {
        let chunks = make_chunks(seed, num_chunks, d);
        let router = Router::new(&chunks, k).unwrap();
        let q = gen_matrix(seed ^ 0x51ab, 1, d);

        let got = router.route(q.row(0)).unwrap();
        let want = oracle_top_k(q.row(0).as_slice().unwrap(), router.entries(), k);
        prop_assert_eq!(got.selected, want);
    }

    /// Growing k extends the selection without reordering what was already
    /// chosen: the k-selection is a prefix of the (k+1)-selection.
    #[test]
    fn selections_nest_as_k_grows(
        seed in any::<u64>(),
        num_chunks in 2usize..=32,
        d in 1usize..=16,
    ) {
        let chunks = make_chunks(seed, num_chunks, d);
        let q = gen_matrix(seed ^ 0x51ab, 1, d);
        let index: Vec<ChunkIndexEntry> = Router::new(&chunks, 1).unwrap().entries().to_vec();

        let mut previous: Vec<usize> = Vec::new();
        for k in 1..=num_chunks {
            let got = route(q.row(0), &index, k).unwrap().selected;
            prop_assert_eq!(got.len(), k);
            prop_assert_eq!(&got[..k - 1], &previous[..]);
            previous = got;
        }
    }

    /// k at (or beyond) the chunk count selects every chunk exactly once.
    #[test]
    fn full_k_covers_every_chunk(
        seed in any::<u64>(),
        num_chunks in 1usize..=32,
        d in 1usize..=16,
        excess in 0usize..=8,
    ) {
        let chunks = make_chunks(seed, num_chunks, d);
        let router = Router::new(&chunks, num_chunks + excess).unwrap();
        let q = gen_matrix(seed ^ 0x51ab, 1, d);

        let mut got = router.route(q.row(0)).unwrap().selected;
        got.sort_unstable();
        let want: Vec<usize> = (0..num_chunks).collect();
        prop_assert_eq!(got, want);
    }

    /// Routing is a pure function of its inputs: rebuilding the index from
    /// the same chunks reproduces the decision exactly.
    #[test]
    fn routing_is_deterministic(
        seed in any::<u64>(),
        num_chunks in 1usize..=24,
        d in 1usize..=16,
        k in 1usize..=8,
    ) {
        let chunks = make_chunks(seed, num_chunks, d);
        let q = gen_matrix(seed ^ 0x51ab, 1, d);
        let a = Router::new(&chunks, k).unwrap().route(q.row(0)).unwrap();
        let b = Router::new(&chunks, k).unwrap().route(q.row(0)).unwrap();
        prop_assert_eq!(a.selected, b.selected);
        prop_assert_eq!(a.scores, b.scores);
    }

    /// Scaling the query by a power of two multiplies every score by the
    /// same exactly-representable factor, so the selection cannot move.
    #[test]
    fn selection_is_invariant_to_exact_query_rescaling(
        seed in any::<u64>(),
        num_chunks in 1usize..=24,
        d in 1usize..=16,
        k in 1usize..=8,
        exponent in -8i32..=8,
    ) {
        let chunks = make_chunks(seed, num_chunks, d);
        let router = Router::new(&chunks, k).unwrap();
        let q = gen_matrix(seed ^ 0x51ab, 1, d);
        let scaled = q.mapv(|x| x * 2f64.powi(exponent));

        let base = router.route(q.row(0)).unwrap().selected;
        let moved = router.route(scaled.row(0)).unwrap().selected;
        prop_assert_eq!(base, moved);
    }

    /// Reported scores are non-increasing and selections never repeat.
    #[test]
    fn decision_shape_is_well_formed(
        seed in any::<u64>(),
        num_chunks in 1usize..=32,
        d in 1usize..=16,
        k in 1usize..=32,
    ) {
        let chunks = make_chunks(seed, num_chunks, d);
        let router = Router::new(&chunks, k).unwrap();
        let q = gen_matrix(seed ^ 0x51ab, 1, d);
        let decision = router.route(q.row(0)).unwrap();

        prop_assert_eq!(decision.selected.len(), k.min(num_chunks));
        prop_assert_eq!(decision.selected.len(), decision.scores.len());
        for w in decision.scores.windows(2) {
            prop_assert!(w[0] >= w[1]);
        }
        let mut ids = decision.selected.clone();
        ids.sort_unstable();
        ids.dedup();
        prop_assert_eq!(ids.len(), decision.selected.len());
    }
}
