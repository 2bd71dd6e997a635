//! Seed derivation. Every random stream in the crate is a ChaCha8 generator
//! keyed by a 64-bit seed mixed from the user seed and a stream label.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// SplitMix64 finaliser.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Combines a seed with a sequence of stream identifiers.
pub fn derive(seed: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(mix64(seed), |acc, &p| mix64(acc ^ mix64(p)))
}

pub fn rng(seed: u64, parts: &[u64]) -> Rng {
    Rng::seed_from_u64(derive(seed, parts))
}

// Stream labels, kept distinct so no two consumers share a generator.
pub const STREAM_CONCEPTS: u64 = 1;
pub const STREAM_IMAGES: u64 = 2;
pub const STREAM_QUERIES: u64 = 3;
pub const STREAM_CLICKS: u64 = 4;
pub const STREAM_JUDGMENTS: u64 = 5;
pub const STREAM_RENDER: u64 = 6;
pub const STREAM_INIT_IMAGE: u64 = 10;
pub const STREAM_INIT_TEXT: u64 = 11;
pub const STREAM_SHUFFLE: u64 = 12;
pub const STREAM_NEGATIVES: u64 = 13;
pub const STREAM_POSITIVES: u64 = 14;
pub const STREAM_EVAL_NEGATIVES: u64 = 15;
pub const STREAM_SPLIT: u64 = 16;
pub const STREAM_RANDOM_RANKING: u64 = 20;
pub const STREAM_GRADCHECK: u64 = 30;
