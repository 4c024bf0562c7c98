//! Portable seeded randomness.
//!
//! Every seeded operation in the crate draws from [`Rng`], the ChaCha
//! stream cipher with 8 rounds as implemented by `rand_chacha`. A `u64` seed
//! is expanded into the 256-bit key by `SeedableRng::seed_from_u64` (PCG32
//! output, little-endian). Independent sub-streams are keyed by mixing the
//! parent seed with stream labels through the SplitMix64 finalizer, so the
//! same `(seed, labels)` reproduces the same draws on every platform.

use rand::SeedableRng;

pub type Rng = rand_chacha::ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a child seed from a parent seed and a list of labels.
pub fn derive_seed(seed: u64, labels: &[u64]) -> u64 {
    labels
        .iter()
        .fold(splitmix64(seed), |acc, &l| splitmix64(acc ^ splitmix64(l)))
}

pub fn stream(seed: u64, labels: &[u64]) -> Rng {
    seeded(derive_seed(seed, labels))
}
