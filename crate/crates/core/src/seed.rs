//! Seed derivation.
//!
//! Every random choice in the pipeline comes from a ChaCha stream whose seed
//! is derived from one root seed and a stage tag, so a run is a pure function
//! of its inputs and the root seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// 64-bit FNV-1a. Also used for feature hashing, where the value must stay
/// stable across platforms and toolchain versions.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive an independent sub-seed for the stage named `tag`.
pub fn derive(root: u64, tag: &str) -> u64 {
    splitmix64(root ^ splitmix64(fnv1a(tag.as_bytes())))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
