//! Deterministic random streams.
//!
//! Every random artifact in the crate is drawn from an [`RngStream`] whose
//! state is a pure function of its derivation path
//! `(global_seed, purpose tag, indices)`. The path is hashed with SHA-256 into
//! a ChaCha8 key; Gaussian variates come from the ziggurat sampler in
//! `rand_distr`. Both choices are fixed for bit-exact reproducibility.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

#[derive(Debug, Clone)]
pub struct RngStream {
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn derive(global_seed: u64, purpose: &str, indices: &[u64]) -> Self {
        let mut hasher = Sha256::new();
        hasher.update(b"esure-rng-v1");
        hasher.update(global_seed.to_le_bytes());
        hasher.update((purpose.len() as u64).to_le_bytes());
        hasher.update(purpose.as_bytes());
        for idx in indices {
            hasher.update(idx.to_le_bytes());
        }
        let seed: [u8; 32] = hasher.finalize().into();
        Self {
            rng: ChaCha8Rng::from_seed(seed),
        }
    }

    /// Child stream keyed on this stream's next output.
    pub fn fork(&mut self, purpose: &str, index: u64) -> Self {
        let base: u64 = self.rng.gen();
        Self::derive(base, purpose, &[index])
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.rng.gen()
    }

    pub fn uniform_range(&mut self, low: f64, high: f64) -> f64 {
        low + (high - low) * self.uniform()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.rng.gen_range(0..n)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.gen()
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.rng.gen_range(0..=i);
            items.swap(i, j);
        }
    }
}
