//! Deterministic random streams.
//!
//! Every stochastic choice in the pipeline (Gumbel noise, crops, flips,
//! shuffles, cutout centers) draws from a [`Rng`] derived from the master
//! seed plus a fixed purpose tag and loop counters. Identical seed and call
//! sequence therefore reproduce identical streams bit for bit, and any
//! stream can be re-derived statelessly from `(seed, purpose, epoch, index)`
//! — the property checkpoint resume relies on.

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::scalar::Scalar;

/// Purpose tags for derived streams. Values are part of the reproducibility
/// contract: changing them changes every seeded run.
pub mod stream {
    pub const SPLIT: u64 = 1;
    pub const WEIGHT_INIT: u64 = 2;
    pub const TRAIN_ORDER: u64 = 3;
    pub const VAL_ORDER: u64 = 4;
    pub const VAL_AUG: u64 = 5;
    pub const TRAIN_AUG: u64 = 6;
    pub const PREPROCESS: u64 = 7;
    pub const CUTOUT: u64 = 8;
    pub const FINAL_TRAIN: u64 = 9;
    pub const SYNTH_DATA: u64 = 10;
    pub const INFER_POLICY: u64 = 11;
}

/// Deterministic generator (ChaCha8, counter-based).
#[derive(Debug, Clone)]
pub struct Rng {
    inner: ChaCha8Rng,
}

/// Serializable snapshot of a generator's position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Derives an independent stream from a master seed and a tag list
    /// (purpose, epoch, batch index, ...).
    pub fn derive(master: u64, tags: &[u64]) -> Self {
        let mut acc = splitmix64(master);
        for &t in tags {
            acc = splitmix64(acc ^ t.wrapping_mul(0xA24B_AED4_963E_E407));
        }
        Rng::new(acc)
    }

    /// Uniform draw in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "Rng::below(0)");
        self.inner.random_range(0..n)
    }

    /// Standard Gumbel draw, `-ln(-ln(u))` with `u` kept inside the open
    /// unit interval.
    pub fn gumbel(&mut self) -> f64 {
        let u = self.uniform().clamp(1e-12, 1.0 - 1e-12);
        -(-u.ln()).ln()
    }

    pub fn fill_gumbel<F: Scalar>(&mut self, out: &mut [F]) {
        for v in out {
            *v = F::fromf(self.gumbel());
        }
    }

    pub fn fill_uniform<F: Scalar>(&mut self, lo: f64, hi: f64, out: &mut [F]) {
        for v in out {
            *v = F::fromf(self.uniform_in(lo, hi));
        }
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i + 1);
            xs.swap(i, j);
        }
    }

    /// Samples an index from unnormalized nonnegative weights.
    pub fn categorical(&mut self, weights: &[f64]) -> usize {
        let total: f64 = weights.iter().sum();
        assert!(total > 0.0, "categorical weights sum to zero");
        let mut r = self.uniform() * total;
        for (i, w) in weights.iter().enumerate() {
            r -= w;
            if r < 0.0 {
                return i;
            }
        }
        weights.len() - 1
    }

    pub fn state(&self) -> RngState {
        RngState {
            seed: self.inner.get_seed(),
            stream: self.inner.get_stream(),
            word_pos: self.inner.get_word_pos(),
        }
    }

    pub fn restore(state: &RngState) -> Self {
        let mut inner = ChaCha8Rng::from_seed(state.seed);
        inner.set_stream(state.stream);
        inner.set_word_pos(state.word_pos);
        Rng { inner }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_seed_identical_stream() {
        let mut a = Rng::new(7);
        let mut b = Rng::new(7);
        for _ in 0..100 {
            assert_eq!(a.uniform().to_bits(), b.uniform().to_bits());
        }
    }

    #[test]
    fn derived_streams_differ_by_tag() {
        let mut a = Rng::derive(7, &[stream::VAL_AUG, 0, 0]);
        let mut b = Rng::derive(7, &[stream::TRAIN_AUG, 0, 0]);
        let xs: Vec<u64> = (0..8).map(|_| a.uniform().to_bits()).collect();
        let ys: Vec<u64> = (0..8).map(|_| b.uniform().to_bits()).collect();
        assert_ne!(xs, ys);
    }

    #[test]
    fn state_restore_resumes_exactly() {
        let mut a = Rng::new(99);
        for _ in 0..13 {
            a.uniform();
        }
        let snap = a.state();
        let tail: Vec<u64> = (0..16).map(|_| a.uniform().to_bits()).collect();
        let mut b = Rng::restore(&snap);
        let tail2: Vec<u64> = (0..16).map(|_| b.uniform().to_bits()).collect();
        assert_eq!(tail, tail2);
    }

    #[test]
    fn shuffle_is_a_permutation() {
        let mut rng = Rng::new(3);
        let mut xs: Vec<usize> = (0..50).collect();
        rng.shuffle(&mut xs);
        let mut sorted = xs.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..50).collect::<Vec<_>>());
    }

    #[test]
    fn gumbel_draws_are_finite() {
        let mut rng = Rng::new(11);
        for _ in 0..10_000 {
            assert!(rng.gumbel().is_finite());
        }
    }
}
