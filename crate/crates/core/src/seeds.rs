//! Seed derivation. Every random choice in the crate is driven by a seed
//! produced here, so outputs are reproducible across runs and platforms.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Combines two values into one well-mixed 64-bit seed.
pub fn mix(a: u64, b: u64) -> u64 {
    splitmix64(splitmix64(a) ^ b.rotate_left(32) ^ 0x5851_f42d_4c95_7f2d)
}

/// Per-image seed used by the CLI and the bindings for description and
/// negative synthesis.
pub fn image_seed(base: u64, image_id: i64) -> u64 {
    mix(base, image_id as u64)
}

/// Seed for the hard-negative sampler of one image; distinct from the
/// description order seed.
pub fn negative_seed(base: u64, image_id: i64) -> u64 {
    mix(image_seed(base, image_id), 0x6e65_6761_7469_7665)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}
