//! Stable seed derivation.
//!
//! `derive(base, stream)` mixes a base seed with a stream index through the
//! SplitMix64 finalizer. The mapping is fixed forever: changing it would change
//! every mask, split and initialization produced from a recorded seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive(base: u64, stream: u64) -> u64 {
    splitmix64(splitmix64(base) ^ stream.wrapping_mul(GOLDEN))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// Stream tags for sub-seeds.
pub const STREAM_SPLIT: u64 = 0x0053_504c_4954;
pub const STREAM_MASK: u64 = 0x4d41_534b;
pub const STREAM_INIT: u64 = 0x494e_4954;
pub const STREAM_TRAIN: u64 = 0x0054_5241_494e;
pub const STREAM_RUN: u64 = 0x0052_554e;
pub const STREAM_SYNTH: u64 = 0x0053_594e_5448;
pub const STREAM_RECORD: u64 = 0x0052_4543;
pub const STREAM_RECON: u64 = 0x0052_4543_4f4e;
