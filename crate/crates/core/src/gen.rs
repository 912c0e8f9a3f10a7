//! Deterministic synthetic data.
//!
//! Test fixtures and the verification harness need KV matrices that are
//! reproducible bit-for-bit across platforms and across reimplementations in
//! other languages, so the generator is spelled out exactly rather than
//! delegated to a library RNG:
//!
//! ```text
//! state   = state + 0x9E3779B97F4A7C15                 (mod 2^64)
//! z       = state
//! z       = (z xor (z >> 30)) * 0xBF58476D1CE4E5B9     (mod 2^64)
//! z       = (z xor (z >> 27)) * 0x94D049BB133111EB     (mod 2^64)
//! z       = z xor (z >> 31)
//! u       = (z >> 11) * 2^-53          // top 53 bits, uniform in [0, 1)
//! sample  = 2u - 1                     // uniform in [-1, 1)
//! ```
//!
//! Both floating-point steps are exact in IEEE-754 double precision (the
//! 53-bit integer is exactly representable, the scale is a power of two, and
//! `2u - 1` is exact for `u` a multiple of 2^-53), so any implementation of
//! the recipe reproduces identical bits.

use ndarray::Array2;

const GAMMA: u64 = 0x9E3779B97F4A7C15;
const MIX1: u64 = 0xBF58476D1CE4E5B9;
const MIX2: u64 = 0x94D049BB133111EB;

/// 64-bit split-mix stream implementing the recipe in the module docs.
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GAMMA);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(MIX1);
        z = (z ^ (z >> 27)).wrapping_mul(MIX2);
        z ^ (z >> 31)
    }

    /// Next sample, uniform in [-1, 1).
    pub fn next_unit(&mut self) -> f64 {
        let u = (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
        2.0 * u - 1.0
    }

    /// Next index, uniform-ish in `0..bound`. Intended for harness-side case
    /// shaping where determinism matters and the modulo bias (< 2^-50 for
    /// desk-scale bounds) does not.
    pub fn next_index(&mut self, bound: usize) -> usize {
        assert!(bound > 0, "next_index bound must be positive");
        (self.next_u64() % bound as u64) as usize
    }

    /// Next integer in the inclusive range `lo..=hi`.
    pub fn next_range(&mut self, lo: usize, hi: usize) -> usize {
        assert!(lo <= hi);
        lo + self.next_index(hi - lo + 1)
    }
}

/// Generates a `rows x cols` matrix, entries drawn in row-major order.
pub fn gen_matrix(seed: u64, rows: usize, cols: usize) -> Array2<f64> {
    let mut rng = SplitMix64::new(seed);
    let data: Vec<f64> = (0..rows * cols).map(|_| rng.next_unit()).collect();
    Array2::from_shape_vec((rows, cols), data).expect("shape matches draw count")
}

/// Generates a `(keys, values)` pair of `n_tokens x head_dim` matrices from
/// one stream: all key entries are drawn first in row-major order, then all
/// value entries.
pub fn gen_synthetic(seed: u64, n_tokens: usize, head_dim: usize) -> (Array2<f64>, Array2<f64>) {
    let mut rng = SplitMix64::new(seed);
    let mut draw = |n: usize| {
        let data: Vec<f64> = (0..n).map(|_| rng.next_unit()).collect();
        data
    };
    let keys = Array2::from_shape_vec((n_tokens, head_dim), draw(n_tokens * head_dim))
        .expect("shape matches draw count");
    let values = Array2::from_shape_vec((n_tokens, head_dim), draw(n_tokens * head_dim))
        .expect("shape matches draw count");
    (keys, values)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stream_matches_frozen_reference_vector() {
        // First three outputs for seed 0, computed independently from the
        // documented recipe. Guards against accidental constant or order
        // changes that would silently break cross-language reproducibility.
        let mut rng = SplitMix64::new(0);
        assert_eq!(rng.next_u64(), 0xE220A8397B1DCDAF);
        assert_eq!(rng.next_u64(), 0x6E789E6AA1B965F4);
        assert_eq!(rng.next_u64(), 0x06C45D188009454F);
    }

    #[test]
    fn unit_samples_live_in_half_open_interval() {
        let mut rng = SplitMix64::new(7);
        for _ in 0..10_000 {
            let x = rng.next_unit();
            assert!((-1.0..1.0).contains(&x));
        }
    }

    #[test]
    fn same_seed_reproduces_bit_identical_matrices() {
        let (k1, v1) = gen_synthetic(42, 17, 9);
        let (k2, v2) = gen_synthetic(42, 17, 9);
        assert_eq!(k1, k2);
        assert_eq!(v1, v2);
        // And a different seed actually changes the stream.
        let (k3, _) = gen_synthetic(43, 17, 9);
        assert_ne!(k1, k3);
    }

    #[test]
    fn zero_tokens_yields_empty_matrices() {
        let (k, v) = gen_synthetic(1, 0, 8);
        assert_eq!(k.shape(), &[0, 8]);
        assert_eq!(v.shape(), &[0, 8]);
    }
}
