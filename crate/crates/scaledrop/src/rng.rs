//! Seeded random streams.
//!
//! Every source of randomness in the crate is derived from the experiment
//! seed plus a textual label and an index, so independent pieces of work
//! (Monte-Carlo passes, dataset generation, device variation draws) get
//! reproducible streams regardless of execution order or thread scheduling.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha12Rng;
use sha2::{Digest, Sha256};

pub type Stream = ChaCha12Rng;

/// Derives an independent stream from (seed, label, index).
pub fn derive_stream(seed: u64, label: &str, index: u64) -> Stream {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update([0x1f]);
    hasher.update(label.as_bytes());
    hasher.update([0x1f]);
    hasher.update(index.to_le_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha12Rng::from_seed(key)
}

/// Random source for dropout masks that counts how many Bernoulli samples
/// were consumed. The single-stochastic-unit property of the architecture is
/// checked by asserting one sample per binary layer per forward pass.
pub struct MaskSource<R: RngCore> {
    rng: R,
    bernoulli_draws: u64,
    uniform_draws: u64,
}

impl<R: RngCore> MaskSource<R> {
    pub fn new(rng: R) -> Self {
        Self {
            rng,
            bernoulli_draws: 0,
            uniform_draws: 0,
        }
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.bernoulli_draws += 1;
        // One u64 per draw keeps the count meaningful.
        let u = self.rng.next_u64() as f64 / (u64::MAX as f64 + 1.0);
        u < p
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        self.uniform_draws += 1;
        self.rng.random_range(lo..hi)
    }

    pub fn bernoulli_draws(&self) -> u64 {
        self.bernoulli_draws
    }

    pub fn uniform_draws(&self) -> u64 {
        self.uniform_draws
    }
}

impl MaskSource<Stream> {
    pub fn for_pass(seed: u64, pass: u64) -> Self {
        Self::new(derive_stream(seed, "mask", pass))
    }
}
