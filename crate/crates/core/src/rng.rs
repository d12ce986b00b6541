//! Seed derivation and the generator every seeded component uses.
//!
//! All randomness flows through `ChaCha8Rng` (rand_chacha 0.9) seeded with
//! `seed_from_u64`. Per-item streams are keyed by SplitMix64 mixing of the
//! parent seed with either an index or the FNV-1a hash of a string key, so
//! results do not depend on thread scheduling or record order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Identifier written into metadata files so other implementations can replay datasets.
pub const PRNG_ID: &str = "chacha8/rand_chacha-0.9/seed_from_u64; per-item seed = splitmix64(seed ^ splitmix64(key))";

pub type Rng = ChaCha8Rng;

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

pub fn derive_seed(seed: u64, index: u64) -> u64 {
    splitmix64(seed ^ splitmix64(index))
}

pub fn derive_seed_str(seed: u64, key: &str) -> u64 {
    derive_seed(seed, fnv1a64(key.as_bytes()))
}

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
