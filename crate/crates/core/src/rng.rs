//! Seed derivation for named random substreams.
//!
//! Every source of randomness in the pipeline (corpus generation, poison
//! sampling, parameter init, batch shuffling, dropout masks) draws from a
//! `ChaCha8Rng` seeded through [`derive_seed`], so a single global seed
//! fully determines all outputs while components stay independently
//! re-runnable.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// FNV-1a over the stream name, mixed with the parent seed via splitmix64.
pub fn derive_seed(parent: u64, stream: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in stream.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    splitmix64(parent ^ h)
}

/// Derive a seed from a parent and a numeric index (per-sample streams).
pub fn derive_seed_indexed(parent: u64, stream: &str, index: u64) -> u64 {
    splitmix64(derive_seed(parent, stream).wrapping_add(index.wrapping_mul(0x9e37_79b9_7f4a_7c15)))
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// The workhorse RNG: seedable, portable, stable across platforms.
pub fn rng_for(parent: u64, stream: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(parent, stream))
}

/// Per-index RNG stream (deterministic parallel-safe fan-out).
pub fn rng_for_indexed(parent: u64, stream: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed_indexed(parent, stream, index))
}
