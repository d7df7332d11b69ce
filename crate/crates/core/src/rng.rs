//! Deterministic seeded randomness.
//!
//! Every source of randomness in the crate flows from explicit seeds through
//! ChaCha12 streams. Independent units of work (images in a suite, model
//! components at init) derive disjoint substreams by mixing the seed with a
//! tag path, so evaluation order and worker layout never change results.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// SplitMix64 step; good avalanche behaviour for seed mixing.
fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A ChaCha12 stream for the given seed.
pub fn stream(seed: u64) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(seed)
}

/// A ChaCha12 stream derived from `seed` and a tag path. Distinct paths give
/// statistically independent streams; the derivation is order-sensitive.
pub fn substream(seed: u64, tags: &[u64]) -> ChaCha12Rng {
    let mut key = [0u8; 32];
    let mut state = seed ^ 0xA076_1D64_78BD_642F;
    for &t in tags {
        let mut tag_state = t;
        state ^= splitmix64(&mut tag_state);
        let mut remix = state;
        state = splitmix64(&mut remix);
    }
    for chunk in key.chunks_mut(8) {
        let word = splitmix64(&mut state);
        chunk.copy_from_slice(&word.to_le_bytes());
    }
    ChaCha12Rng::from_seed(key)
}

/// Well-known tag roots for substream derivation.
pub mod tag {
    pub const ENCODER: u64 = 1;
    pub const DECODER_HEAD: u64 = 2;
    pub const AUX_HEAD: u64 = 3;
    pub const DISCRIMINATOR: u64 = 4;
    pub const DATASET: u64 = 5;
    pub const SUITE_INTRA: u64 = 6;
    pub const SUITE_CROSS: u64 = 7;
    pub const TRAINING: u64 = 8;
    pub const SYNTH_IMAGE: u64 = 9;
    pub const GRADCHECK: u64 = 10;
    pub const SIGNATURES: u64 = 11;
}
