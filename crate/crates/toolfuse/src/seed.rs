//! Deterministic rng-stream derivation.
//!
//! All randomness in an experiment flows from a single root seed. Per-image
//! and per-(epoch, item) streams are derived by hashing the root seed with a
//! context string, so work can be parallelized or reordered without changing
//! results.

use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::SeedableRng;
use sha2::{Digest, Sha256};

/// Derive an independent rng stream from a root seed and a context label.
pub fn derive_rng(root_seed: u64, context: &str) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(root_seed.to_le_bytes());
    hasher.update([0u8]);
    hasher.update(context.as_bytes());
    let digest = hasher.finalize();
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(seed)
}
