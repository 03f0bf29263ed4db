//! Seeded pseudo-random numbers on top of ChaCha8, whose output for a given
//! seed is fixed across platforms and crate versions.

use rand::seq::SliceRandom;
use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Mixes a base seed with a path of integers into a new seed.
pub fn derive_seed(seed: u64, path: &[u64]) -> u64 {
    let key = |a: u64, b: u64, tag: u64| {
        let mut k = [0u8; 32];
        k[..8].copy_from_slice(&a.to_le_bytes());
        k[8..16].copy_from_slice(&b.to_le_bytes());
        k[16..24].copy_from_slice(&tag.to_le_bytes());
        ChaCha8Rng::from_seed(k).next_u64()
    };
    path.iter().fold(key(seed, 0, 0), |s, &p| key(s, p, 1))
}

#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent stream keyed by `path` under this generator's seed.
    pub fn fork(&self, path: &[u64]) -> Rng {
        Rng::new(derive_seed(self.seed, path))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random()
    }

    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `[0, n)`; `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        self.inner.random_range(0..n as u64) as usize
    }

    /// Uniform integer in the inclusive range `[lo, hi]`.
    pub fn range_inclusive(&mut self, lo: usize, hi: usize) -> usize {
        lo + self.below(hi - lo + 1)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.inner);
    }
}
