//! Seed derivation. Every random stream in the toolkit is a ChaCha8 generator
//! seeded from a root seed and a stream label, so results do not depend on
//! platform or on the order in which modules draw numbers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SeededRng = ChaCha8Rng;

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a sub-seed for a named stream.
pub fn derive_seed(seed: u64, stream: &str) -> u64 {
    let mut h = mix64(seed);
    for b in stream.bytes() {
        h = mix64(h ^ u64::from(b));
    }
    h
}

pub fn rng_for(seed: u64, stream: &str) -> SeededRng {
    SeededRng::seed_from_u64(derive_seed(seed, stream))
}

pub fn rng_indexed(seed: u64, stream: &str, index: u64) -> SeededRng {
    SeededRng::seed_from_u64(mix64(derive_seed(seed, stream) ^ mix64(index)))
}
