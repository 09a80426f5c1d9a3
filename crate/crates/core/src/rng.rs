//! Seed derivation. Every random stream in the crate is a ChaCha8 generator
//! keyed by the user seed and a fixed stream id, so that independent
//! consumers never share state and results do not depend on call order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type DrmRng = ChaCha8Rng;

pub const STREAM_INIT: u64 = 1;
pub const STREAM_PERTURB: u64 = 2;
pub const STREAM_COIN: u64 = 3;
pub const STREAM_EVAL: u64 = 4;
pub const STREAM_DATA_TRAIN: u64 = 5;
pub const STREAM_DATA_TEST: u64 = 6;
pub const STREAM_NOISE: u64 = 7;
pub const STREAM_LANDSCAPE: u64 = 8;
/// Batch order for epoch `e` uses stream `STREAM_BATCH_BASE + e`.
pub const STREAM_BATCH_BASE: u64 = 1 << 32;
/// Landscape direction `i` uses stream `STREAM_DIRECTION_BASE + i`.
pub const STREAM_DIRECTION_BASE: u64 = 1 << 40;
/// Monte-Carlo trials, see [`trial_stream`].
pub const STREAM_TRIAL_BASE: u64 = 1 << 48;

/// Stream for trial `trial` of a study at sample size `m`. Both must be
/// below 2^24.
pub fn trial_stream(m: usize, trial: usize) -> u64 {
    assert!(m < 1 << 24 && trial < 1 << 24, "trial stream out of range");
    STREAM_TRIAL_BASE | ((m as u64) << 24) | trial as u64
}

pub fn stream_rng(seed: u64, stream: u64) -> DrmRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
