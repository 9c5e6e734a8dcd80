//! Deterministic RNG stream derivation.
//!
//! Every stochastic stage (cohort synthesis, augmentation, dropout, batch
//! shuffling, ...) draws from its own [`ChaCha8Rng`] keyed by the global seed
//! plus a tag path, e.g. `derive_rng(seed, &[stream::AUGMENT, nucleus_id,
//! replicate])`. Streams are pure functions of `(seed, tags)`, so results are
//! independent of evaluation order and thread schedule, and individual samples
//! can be re-materialized on demand without replaying a shared generator.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Tag constants naming the independent RNG streams. Values are arbitrary but
/// fixed; changing them changes every derived stream.
pub mod stream {
    pub const INIT: u64 = 1;
    pub const DROPOUT: u64 = 2;
    pub const SHUFFLE: u64 = 3;
    pub const SYNTH: u64 = 4;
    pub const SAMPLING: u64 = 5;
    pub const AUGMENT: u64 = 6;
    pub const BACKGROUND: u64 = 7;
    pub const VALIDATION: u64 = 8;
}

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

/// splitmix64 finalizer: a bijective avalanche mix.
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives an independent ChaCha8 stream from a global seed and a tag path.
///
/// The seed and each tag are absorbed through splitmix64 rounds; the final
/// state is expanded into the 32-byte ChaCha key. Distinct tag paths give
/// streams that are independent for all practical purposes.
pub fn derive_rng(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    let mut state = mix(seed.wrapping_add(GOLDEN));
    for &tag in tags {
        state = mix(state.wrapping_add(GOLDEN) ^ mix(tag.wrapping_add(GOLDEN)));
    }
    let mut key = [0u8; 32];
    for word in 0..4 {
        state = state.wrapping_add(GOLDEN);
        key[word * 8..word * 8 + 8].copy_from_slice(&mix(state).to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}
