//! Seedable per-trial random streams.
//!
//! Every experiment trial draws from its own ChaCha8 stream: the key comes
//! from the master seed, the stream id from the trial index. Trials are
//! therefore independent of scheduling order and of the thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type TrialRng = ChaCha8Rng;

/// Stream for `(master_seed, trial)`.
pub fn trial_rng(master_seed: u64, trial: u64) -> TrialRng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(trial);
    rng
}

/// Combine hierarchical trial coordinates (experiment tag, grid index, seed...)
/// into a single stream id. SplitMix64 finalizer over a running fold.
pub fn stream_id(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x243F_6A88_85A3_08D3;
    for &p in parts {
        h ^= p;
        h = h.wrapping_add(0x9E37_79B9_7F4A_7C15);
        h = (h ^ (h >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        h = (h ^ (h >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h ^= h >> 31;
    }
    h
}
