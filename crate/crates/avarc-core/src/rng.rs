//! Seeded randomness. Every stochastic path in the crate draws from a
//! [`SeedRng`] constructed here so runs are reproducible from a single seed.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// The one RNG type used throughout the crate. ChaCha keeps streams portable
/// across platforms and rand versions.
pub type SeedRng = ChaCha12Rng;

/// RNG from a bare seed.
pub fn rng_from_seed(seed: u64) -> SeedRng {
    SeedRng::seed_from_u64(seed)
}

/// Derive an independent stream for a named sub-task of a run.
///
/// Mixing the label into the seed keeps e.g. tokenizer init, noise draws and
/// data shuffling decorrelated while staying a pure function of (seed, label).
pub fn derive_rng(seed: u64, label: &str) -> SeedRng {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x1000_0000_01b3);
    }
    rng_from_seed(seed ^ h)
}

/// FNV-1a over bytes; used for config hashes in benchmark records.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x1000_0000_01b3);
    }
    h
}
