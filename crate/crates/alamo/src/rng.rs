//! Seedable, portable random source.
//!
//! Every stochastic step in the pipeline draws from [`Rng`], a thin
//! wrapper over the ChaCha8 stream cipher (`rand_chacha::ChaCha8Rng`).
//! The mappings from raw 64-bit words to uniform/normal variates are
//! fixed here so that a given seed reproduces byte-identical datasets,
//! augmentations and training traces on any platform:
//!
//! * `uniform()`  — `(next_u64 >> 11) * 2^-53`, i.e. 53 mantissa bits in `[0, 1)`.
//! * `range_f64(lo, hi)` — `lo + uniform() * (hi - lo)`.
//! * `below(n)`   — `next_u64 % n` (modulo draw; bias is `n / 2^64`).
//! * `normal()`   — Box-Muller, consuming exactly two uniforms per variate.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

#[derive(Debug, Clone)]
pub struct Rng(ChaCha8Rng);

impl Rng {
    pub fn seed_from_u64(seed: u64) -> Self {
        Rng(ChaCha8Rng::seed_from_u64(seed))
    }

    /// Derive an independent stream for a sub-task (e.g. one phantom
    /// case out of a dataset) without disturbing the parent stream.
    pub fn derive(seed: u64, index: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(index.wrapping_add(1));
        Rng(rng)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }

    /// Uniform in `[0, 1)` with 53 random mantissa bits.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn range_f64(&mut self, lo: f64, hi: f64) -> f64 {
        lo + self.uniform() * (hi - lo)
    }

    /// Uniform integer in `[0, n)`. Panics if `n == 0`.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0)");
        self.next_u64() % n
    }

    pub fn coin(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Standard normal via Box-Muller (cosine branch only, so each
    /// variate consumes exactly two words of the stream).
    pub fn normal(&mut self) -> f64 {
        let u1 = self.uniform();
        let u2 = self.uniform();
        // 1 - u1 keeps the log argument in (0, 1].
        (-2.0 * (1.0 - u1).ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }

    /// Raw cipher state for checkpointing: (seed, word position).
    pub fn state(&self) -> ([u8; 32], u128) {
        (self.0.get_seed(), self.0.get_word_pos())
    }

    pub fn from_state(seed: [u8; 32], word_pos: u128) -> Self {
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_word_pos(word_pos);
        Rng(rng)
    }
}
