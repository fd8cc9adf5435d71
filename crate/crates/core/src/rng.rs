//! Seed plumbing.
//!
//! Every random draw in the crate comes from `ChaCha8Rng` (rand_chacha 0.9),
//! seeded with `seed_from_u64` and split into independent streams with
//! `set_stream`. ChaCha8 is specified independently of platform and word
//! size, so seeded runs agree bitwise across machines.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer, used to derive child seeds.
pub fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a child seed from a parent seed and a label.
pub fn derive(seed: u64, label: u64) -> u64 {
    mix(seed ^ mix(label))
}

pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
