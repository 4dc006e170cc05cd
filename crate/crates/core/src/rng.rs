//! Seed derivation for reproducible, stream-separated random number use.
//!
//! Every stochastic routine takes an explicit seed and derives its own
//! ChaCha stream from `(seed, label, index...)`, so concurrent workers and
//! repeated runs see identical draws regardless of scheduling.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Derive an independent RNG stream from a master seed, a textual label, and
/// any number of integer indices (e.g. replication or unit index).
pub fn derive_rng(master_seed: u64, label: &str, indices: &[u64]) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(master_seed.to_le_bytes());
    hasher.update([0xff]);
    hasher.update(label.as_bytes());
    for ix in indices {
        hasher.update([0xfe]);
        hasher.update(ix.to_le_bytes());
    }
    let digest = hasher.finalize();
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(seed)
}
