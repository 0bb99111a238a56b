//! Labeled seed derivation.
//!
//! Every random stream in the pipeline is addressed by a path of labels
//! hanging off the global seed, e.g. `seed / "forest" / "high_order" / rep 3 / fold 7`.
//! Streams are therefore independent of scheduling order, and adding a
//! subject or a repetition never perturbs the streams of the others.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// The generator used throughout the crate.
pub type Rng = ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct SeedPath {
    hasher: Sha256,
}

impl SeedPath {
    pub fn new(seed: u64) -> Self {
        let mut hasher = Sha256::new();
        hasher.update(b"energyscape/seed");
        hasher.update(seed.to_le_bytes());
        Self { hasher }
    }

    pub fn label(mut self, label: &str) -> Self {
        self.hasher.update(b"/s");
        self.hasher.update((label.len() as u64).to_le_bytes());
        self.hasher.update(label.as_bytes());
        self
    }

    pub fn index(mut self, index: u64) -> Self {
        self.hasher.update(b"/i");
        self.hasher.update(index.to_le_bytes());
        self
    }

    pub fn seed(&self) -> u64 {
        let digest = self.hasher.clone().finalize();
        let mut bytes = [0u8; 8];
        bytes.copy_from_slice(&digest[..8]);
        u64::from_le_bytes(bytes)
    }

    pub fn rng(&self) -> Rng {
        Rng::seed_from_u64(self.seed())
    }
}

/// Shorthand for a generator derived from `seed` and a single label.
pub fn rng_for(seed: u64, label: &str) -> Rng {
    SeedPath::new(seed).label(label).rng()
}
