//! Deterministic randomness: one root seed, many named streams.
//!
//! Every random decision in the crate draws from a stream obtained by
//! hashing `(root, label)`. Adding a new consumer with a fresh label never
//! perturbs the draws seen by existing consumers, which keeps seeded runs
//! reproducible across code evolution.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedSplitter {
    root: u64,
}

impl SeedSplitter {
    pub fn new(root: u64) -> Self {
        Self { root }
    }

    pub fn root(&self) -> u64 {
        self.root
    }

    /// An independent RNG for the given purpose label.
    pub fn stream(&self, label: &str) -> ChaCha8Rng {
        let mut h = Sha256::new();
        h.update(self.root.to_le_bytes());
        h.update([0u8]);
        h.update(label.as_bytes());
        let digest = h.finalize();
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest);
        ChaCha8Rng::from_seed(seed)
    }

    /// Stream for the `index`-th consumer of a labelled family
    /// (evaluation repeats, trajectories, outer iterations, ...).
    pub fn indexed(&self, label: &str, index: u64) -> ChaCha8Rng {
        self.stream(&format!("{label}/{index}"))
    }

    /// A derived splitter, for handing a component its own namespace.
    pub fn scoped(&self, label: &str) -> SeedSplitter {
        let mut h = Sha256::new();
        h.update(self.root.to_le_bytes());
        h.update([1u8]);
        h.update(label.as_bytes());
        let digest = h.finalize();
        let mut bytes = [0u8; 8];
        bytes.copy_from_slice(&digest[..8]);
        SeedSplitter::new(u64::from_le_bytes(bytes))
    }
}
