//! Deterministic, splittable random streams.
//!
//! Every consumer derives its own generator from `(seed, tag, index)`, so
//! results do not depend on evaluation order or thread scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn tag_hash(tag: &str) -> u64 {
    // FNV-1a
    tag.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01B3))
}

/// Generator for substream `index` of purpose `tag` under `seed`.
pub fn stream(seed: u64, tag: &str, index: u64) -> Rng {
    let key = splitmix64(splitmix64(seed ^ tag_hash(tag)) ^ splitmix64(index.wrapping_add(0x632B_E59B_D9B4_E019)));
    ChaCha8Rng::seed_from_u64(key)
}
