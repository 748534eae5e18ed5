//! Seeded random streams.
//!
//! All randomness comes from ChaCha8 keyed by a 64-bit seed. Independent
//! consumers (initialization, shuffling, triplet mining, ...) draw from
//! separate ChaCha streams of the same key, so enabling one consumer never
//! shifts the draws seen by another.

use rand::seq::SliceRandom;
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Named stream ids used by the training code.
pub mod stream {
    pub const INIT: u64 = 1;
    pub const PRETRAIN_SHUFFLE: u64 = 2;
    pub const FINETUNE_SHUFFLE: u64 = 3;
    pub const TRIPLETS: u64 = 4;
    pub const SPLIT: u64 = 5;
    pub const PROBE: u64 = 6;
    pub const SYNTH: u64 = 7;
}

#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { seed, inner }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Uniform draw in `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        let u: f64 = self.inner.random();
        lo + (hi - lo) * u
    }

    pub fn normal(&mut self, mean: f64, sd: f64) -> f64 {
        let z: f64 = StandardNormal.sample(&mut self.inner);
        mean + sd * z
    }

    /// Uniform index in `0..n`. `n` must be positive.
    pub fn index(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n as u64) as usize
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.inner);
    }
}
