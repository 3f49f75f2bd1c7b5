//! Deterministic random number streams.
//!
//! Every stochastic component draws from a named stream derived from one run
//! seed, so runs with equal seeds are bit-identical and adding a consumer
//! never perturbs the draws of an unrelated one.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Derives an independent stream: the ChaCha8 key is
/// `sha256(seed_le || purpose || index_le)`.
pub fn stream(seed: u64, purpose: &str, index: u64) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(purpose.as_bytes());
    hasher.update(index.to_le_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}
