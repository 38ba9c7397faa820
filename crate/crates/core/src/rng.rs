//! Seed plumbing. Every random draw in the crate goes through a ChaCha8
//! stream whose seed is derived from a parent seed and a tag, so runs are
//! reproducible bit-for-bit on any platform.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Child seed for `tag` under `seed`.
pub fn derive(seed: u64, tag: u64) -> u64 {
    splitmix64(seed ^ splitmix64(tag.wrapping_add(0x5EED)))
}

/// Child seed for a path of tags, e.g. `(loop, frame, step)`.
pub fn derive_path(seed: u64, tags: &[u64]) -> u64 {
    tags.iter().fold(seed, |s, &t| derive(s, t))
}

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Stable tags for named random streams.
pub mod tags {
    pub const INIT: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const AUGMENT: u64 = 3;
    pub const PROMPT: u64 = 4;
    pub const TTT: u64 = 5;
    pub const SCENE: u64 = 6;
    pub const SHIFT: u64 = 7;
    pub const SPLIT: u64 = 8;
    pub const NOISE: u64 = 9;
}
