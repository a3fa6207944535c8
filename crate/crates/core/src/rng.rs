//! Named random sub-streams derived from a single run seed.
//!
//! Each stage (shuffling, initialization, row sampling, jitter) draws from its
//! own stream so that changing how much randomness one stage consumes never
//! shifts another stage's draws.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

pub const TRAIN: &str = "train";
pub const INIT: &str = "init";
pub const SHUFFLE: &str = "shuffle";
pub const SAMPLE: &str = "sample";
pub const JITTER: &str = "jitter";

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Deterministic generator for `(seed, name, index)`.
pub fn stream(seed: u64, name: &str, index: u64) -> StreamRng {
    let key = splitmix64(splitmix64(seed ^ fnv1a(name)) ^ splitmix64(index));
    ChaCha8Rng::seed_from_u64(key)
}
