//! Deterministic seed derivation. No global RNG anywhere in the crate.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Child seed for `(master, stream, index)`: `mix64(mix64(master + φ·(stream+1)) + φ·(index+1))`.
pub fn derive_seed(master: u64, stream: u64, index: u64) -> u64 {
    let a = mix64(master.wrapping_add(GOLDEN.wrapping_mul(stream.wrapping_add(1))));
    mix64(a.wrapping_add(GOLDEN.wrapping_mul(index.wrapping_add(1))))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Named streams so different consumers of one master seed never collide.
pub mod stream {
    pub const INIT: u64 = 1;
    pub const BATCH_ORDER: u64 = 2;
    pub const TRAIN_NOISE: u64 = 3;
    pub const EVAL_NOISE: u64 = 4;
    pub const MODEL: u64 = 5;
    pub const DP_SGD: u64 = 6;
    pub const DATA: u64 = 7;
    pub const PLAN: u64 = 8;
    pub const ATTACK: u64 = 9;
}
