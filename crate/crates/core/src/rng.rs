//! Portable seeded randomness for the vote fallback.
//!
//! ChaCha8 produces the same stream on every platform, and per-sample seeds
//! are derived from the sample id. Together these keep runs reproducible
//! regardless of scheduling order or resume points.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Derives the seed for one sample from the run's global seed.
pub fn mix_seed(global_seed: u64, sample_id: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(global_seed.to_le_bytes());
    hasher.update(sample_id.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("sha256 yields 32 bytes"))
}

/// Uniform index in `0..len` drawn from a generator seeded with `seed`.
pub fn pick_uniform(seed: u64, len: usize) -> usize {
    assert!(len > 0, "pick_uniform over an empty range");
    ChaCha8Rng::seed_from_u64(seed).random_range(0..len)
}

pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
