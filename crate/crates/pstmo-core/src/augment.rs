//! Input corruption used for robustness evaluation: Gaussian keypoint noise
//! and random frame shuffling. Both touch only the 2D inputs; 3D targets are
//! never modified.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{ensure, Result};
use crate::pose::{PoseSequence, WindowSample};

/// Adds i.i.d. zero-mean Gaussian noise to every 2D coordinate.
pub fn add_gaussian_noise(
    seq: &PoseSequence,
    sigma: f64,
    rng: &mut ChaCha8Rng,
) -> Result<PoseSequence> {
    ensure!(
        sigma >= 0.0,
        Validation,
        "noise sigma must be nonnegative, got {sigma}"
    );
    if sigma == 0.0 {
        return Ok(seq.clone());
    }
    let normal = Normal::new(0.0, sigma).expect("sigma checked above");
    let mut out = seq.clone();
    for v in out.frames_raw_mut() {
        *v = (*v as f64 + normal.sample(rng)) as f32;
    }
    Ok(out)
}

/// Permutes the input frames of a window uniformly at random; targets and
/// center frame bookkeeping stay untouched.
pub fn shuffle_frames(window: &WindowSample, rng: &mut ChaCha8Rng) -> WindowSample {
    let mut order: Vec<usize> = (0..window.num_frames).collect();
    order.shuffle(rng);
    let row = window.num_joints * 2;
    let mut inputs = Vec::with_capacity(window.inputs.len());
    for &src in &order {
        inputs.extend_from_slice(&window.inputs[src * row..(src + 1) * row]);
    }
    WindowSample {
        inputs,
        ..window.clone()
    }
}
