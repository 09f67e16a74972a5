//! Deterministic stream derivation for every randomized pipeline stage.
//!
//! Each consumer (masking, dropout, augmentation, init, ...) gets its own
//! ChaCha stream derived from the run seed plus structured coordinates
//! (stage, epoch, item index). Work scheduled across threads therefore
//! produces identical results regardless of worker count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stable stream labels; values are arbitrary but fixed.
#[derive(Clone, Copy, Debug)]
pub enum Stream {
    Init = 1,
    MaskPlan = 2,
    Dropout = 3,
    Flip = 4,
    Order = 5,
    Synth = 6,
    Augment = 7,
}

/// splitmix64 finalizer; good avalanche for seed mixing.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Derives an independent generator from `(seed, stream, coords...)`.
pub fn derive(seed: u64, stream: Stream, coords: &[u64]) -> ChaCha8Rng {
    let mut state = mix(seed ^ mix(stream as u64));
    for &c in coords {
        state = mix(state ^ mix(c));
    }
    ChaCha8Rng::seed_from_u64(state)
}
