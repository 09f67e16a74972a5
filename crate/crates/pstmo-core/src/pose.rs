//! Pose containers, screen normalization, window extraction and flipping.
//!
//! A [`PoseSequence`] stores its arrays as f32 to match the on-disk layout
//! exactly (loads and saves round-trip bit for bit); model-facing windows are
//! widened to f64 at extraction time.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::skeleton::Skeleton;

/// One 2D pose, `J` rows of (x, y) in normalized screen coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct Pose2D {
    pub coords: Vec<[f64; 2]>,
}

/// One 3D pose, `J` rows of (x, y, z) in millimeters, root-relative.
#[derive(Clone, Debug, PartialEq)]
pub struct Pose3D {
    pub coords: Vec<[f64; 3]>,
}

/// Sequence labels carried through training and metric aggregation.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SequenceLabels {
    pub subject: String,
    pub action: String,
    pub camera: String,
}

/// A time-indexed sequence of 2D poses with optional 3D targets.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseSequence {
    frames: Vec<f32>,          // T * J * 2
    targets: Option<Vec<f32>>, // T * J * 3
    num_frames: usize,
    num_joints: usize,
    pub fps: f64,
    pub labels: SequenceLabels,
}

impl PoseSequence {
    pub fn new(
        frames: Vec<f32>,
        targets: Option<Vec<f32>>,
        num_joints: usize,
        fps: f64,
        labels: SequenceLabels,
    ) -> Result<Self> {
        ensure!(
            num_joints >= 1,
            Validation,
            "sequence needs at least one joint"
        );
        ensure!(
            frames.len().is_multiple_of(num_joints * 2),
            Shape,
            "2D frame buffer length {} not divisible by J*2 = {}",
            frames.len(),
            num_joints * 2
        );
        let num_frames = frames.len() / (num_joints * 2);
        ensure!(
            num_frames >= 1,
            Validation,
            "sequence must contain at least one frame"
        );
        ensure!(
            frames.iter().all(|v| v.is_finite()),
            Numeric,
            "2D frames contain non-finite values"
        );
        if let Some(t) = &targets {
            ensure!(
                t.len() == num_frames * num_joints * 3,
                Shape,
                "3D target buffer length {} != T*J*3 = {}",
                t.len(),
                num_frames * num_joints * 3
            );
            ensure!(
                t.iter().all(|v| v.is_finite()),
                Numeric,
                "3D targets contain non-finite values"
            );
        }
        Ok(PoseSequence {
            frames,
            targets,
            num_frames,
            num_joints,
            fps,
            labels,
        })
    }

    pub fn num_frames(&self) -> usize {
        self.num_frames
    }

    pub fn num_joints(&self) -> usize {
        self.num_joints
    }

    pub fn has_targets(&self) -> bool {
        self.targets.is_some()
    }

    pub fn frames_raw(&self) -> &[f32] {
        &self.frames
    }

    pub fn targets_raw(&self) -> Option<&[f32]> {
        self.targets.as_deref()
    }

    pub fn frames_raw_mut(&mut self) -> &mut [f32] {
        &mut self.frames
    }

    pub fn pose2d(&self, t: usize) -> Pose2D {
        let j = self.num_joints;
        let base = t * j * 2;
        Pose2D {
            coords: (0..j)
                .map(|q| {
                    [
                        self.frames[base + 2 * q] as f64,
                        self.frames[base + 2 * q + 1] as f64,
                    ]
                })
                .collect(),
        }
    }

    pub fn pose3d(&self, t: usize) -> Option<Pose3D> {
        let targets = self.targets.as_ref()?;
        let j = self.num_joints;
        let base = t * j * 3;
        Some(Pose3D {
            coords: (0..j)
                .map(|q| {
                    [
                        targets[base + 3 * q] as f64,
                        targets[base + 3 * q + 1] as f64,
                        targets[base + 3 * q + 2] as f64,
                    ]
                })
                .collect(),
        })
    }
}

/// One model input window: `N` strided 2D poses centered on a frame, plus
/// the 3D targets when the sequence carries them.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowSample {
    /// `N * J * 2`, row-major (frame, joint, coordinate).
    pub inputs: Vec<f64>,
    /// `J * 3` target for the center frame.
    pub target_center: Option<Vec<f64>>,
    /// `N * J * 3` targets for every window frame.
    pub targets_all: Option<Vec<f64>>,
    pub center_index: usize,
    pub stride: usize,
    pub num_frames: usize,
    pub num_joints: usize,
    pub action: String,
}

/// Maps pixel coordinates to the normalized screen square.
///
/// Both axes are divided by the image width: x → 2·px/w − 1 and
/// y → 2·py/w − h/w, which preserves aspect ratio.
pub fn normalize_screen(pixels: &[f64], width: u32, height: u32) -> Result<Vec<f64>> {
    ensure!(
        width > 0 && height > 0,
        Validation,
        "image dimensions must be positive"
    );
    ensure!(
        pixels.len().is_multiple_of(2),
        Shape,
        "pixel buffer must hold (x, y) pairs"
    );
    ensure!(
        pixels.iter().all(|v| v.is_finite()),
        Numeric,
        "pixel coordinates contain non-finite values"
    );
    let w = width as f64;
    let h = height as f64;
    Ok(pixels
        .chunks_exact(2)
        .flat_map(|p| [2.0 * p[0] / w - 1.0, 2.0 * p[1] / w - h / w])
        .collect())
}

/// Extracts an `N`-frame window with stride `s`, centered on `center`.
/// Out-of-range source indices are clamped to the sequence bounds.
pub fn extract_window(
    seq: &PoseSequence,
    center: usize,
    n: usize,
    s: usize,
) -> Result<WindowSample> {
    ensure!(n % 2 == 1, Validation, "window length must be odd, got {n}");
    ensure!(s >= 1, Validation, "stride must be at least 1");
    ensure!(
        center < seq.num_frames(),
        Validation,
        "center {center} out of range"
    );
    let t = seq.num_frames() as i64;
    let j = seq.num_joints();
    let half = (n as i64 - 1) / 2;
    let indices: Vec<usize> = (-half..=half)
        .map(|k| (center as i64 + k * s as i64).clamp(0, t - 1) as usize)
        .collect();

    let mut inputs = Vec::with_capacity(n * j * 2);
    for &i in &indices {
        inputs.extend(
            seq.frames_raw()[i * j * 2..(i + 1) * j * 2]
                .iter()
                .map(|&v| v as f64),
        );
    }
    let (targets_all, target_center) = match seq.targets_raw() {
        Some(t3) => {
            let mut all = Vec::with_capacity(n * j * 3);
            for &i in &indices {
                all.extend(t3[i * j * 3..(i + 1) * j * 3].iter().map(|&v| v as f64));
            }
            let c = &t3[center * j * 3..(center + 1) * j * 3];
            (Some(all), Some(c.iter().map(|&v| v as f64).collect()))
        }
        None => (None, None),
    };
    Ok(WindowSample {
        inputs,
        target_center,
        targets_all,
        center_index: center,
        stride: s,
        num_frames: n,
        num_joints: j,
        action: seq.labels.action.clone(),
    })
}

/// Source indices a window draws from, after clamping; exposed for tests
/// and for receptive-field reporting.
pub fn window_indices(t: usize, center: usize, n: usize, s: usize) -> Vec<usize> {
    let half = (n as i64 - 1) / 2;
    (-half..=half)
        .map(|k| (center as i64 + k * s as i64).clamp(0, t as i64 - 1) as usize)
        .collect()
}

/// Negates x and swaps mirrored joints in a flat `[.., J*dim]` buffer.
pub fn flip_joint_buffer(buf: &mut [f64], num_joints: usize, dim: usize, pairs: &[(usize, usize)]) {
    let row = num_joints * dim;
    assert_eq!(buf.len() % row, 0, "buffer is not a whole number of poses");
    for pose in buf.chunks_exact_mut(row) {
        for v in pose.iter_mut().step_by(dim) {
            *v = -*v;
        }
        for &(l, r) in pairs {
            for c in 0..dim {
                pose.swap(l * dim + c, r * dim + c);
            }
        }
    }
}

/// Horizontal flip of a 2D pose: x negated, left/right joints swapped.
pub fn horizontal_flip_2d(pose: &Pose2D, skeleton: &Skeleton) -> Pose2D {
    assert_eq!(
        pose.coords.len(),
        skeleton.num_joints(),
        "pose does not match skeleton"
    );
    let mut flat: Vec<f64> = pose.coords.iter().flatten().copied().collect();
    flip_joint_buffer(&mut flat, skeleton.num_joints(), 2, &skeleton.lr_pairs);
    Pose2D {
        coords: flat.chunks_exact(2).map(|c| [c[0], c[1]]).collect(),
    }
}

/// Horizontal flip of a 3D pose.
pub fn horizontal_flip_3d(pose: &Pose3D, skeleton: &Skeleton) -> Pose3D {
    assert_eq!(
        pose.coords.len(),
        skeleton.num_joints(),
        "pose does not match skeleton"
    );
    let mut flat: Vec<f64> = pose.coords.iter().flatten().copied().collect();
    flip_joint_buffer(&mut flat, skeleton.num_joints(), 3, &skeleton.lr_pairs);
    Pose3D {
        coords: flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect(),
    }
}

/// Flips a whole window in place: inputs and, when present, both targets.
pub fn flip_window(window: &mut WindowSample, skeleton: &Skeleton) {
    let j = window.num_joints;
    flip_joint_buffer(&mut window.inputs, j, 2, &skeleton.lr_pairs);
    if let Some(t) = &mut window.targets_all {
        flip_joint_buffer(t, j, 3, &skeleton.lr_pairs);
    }
    if let Some(t) = &mut window.target_center {
        flip_joint_buffer(t, j, 3, &skeleton.lr_pairs);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(t: usize, j: usize) -> PoseSequence {
        // Frame i has all coordinates equal to i so indices are recoverable.
        let frames: Vec<f32> = (0..t).flat_map(|i| vec![i as f32; j * 2]).collect();
        PoseSequence::new(frames, None, j, 50.0, SequenceLabels::default()).unwrap()
    }

    #[test]
    fn normalize_screen_examples() {
        let out = normalize_screen(&[500.0, 500.0], 1000, 1000).unwrap();
        assert_eq!(out, vec![0.0, 0.0]);
        let out = normalize_screen(&[0.0, 0.0], 1000, 1000).unwrap();
        assert_eq!(out, vec![-1.0, -1.0]);
        let out = normalize_screen(&[750.0, 250.0], 1000, 500).unwrap();
        assert_eq!(out, vec![0.5, 0.0]);
    }

    #[test]
    fn normalize_screen_rejects_non_finite() {
        assert!(normalize_screen(&[f64::NAN, 0.0], 100, 100).is_err());
    }

    #[test]
    fn window_edge_replication() {
        assert_eq!(window_indices(10, 0, 5, 1), vec![0, 0, 0, 1, 2]);
        let s = seq(10, 2);
        let w = extract_window(&s, 0, 5, 1).unwrap();
        let per_frame: Vec<f64> = w.inputs.chunks_exact(4).map(|c| c[0]).collect();
        assert_eq!(per_frame, vec![0.0, 0.0, 0.0, 1.0, 2.0]);
    }

    #[test]
    fn window_single_frame() {
        let s = seq(10, 2);
        let w = extract_window(&s, 4, 1, 1).unwrap();
        assert_eq!(w.num_frames, 1);
        assert_eq!(w.inputs[0], 4.0);
    }

    #[test]
    fn window_interior_span_covers_n_s_frames() {
        // N=243, s=2 windows span 485 consecutive source frames.
        let idx = window_indices(1000, 500, 243, 2);
        assert_eq!(idx.len(), 243);
        assert_eq!(idx.last().unwrap() - idx.first().unwrap() + 1, 485);
        assert_eq!(idx[121], 500);
    }

    #[test]
    fn window_even_n_rejected() {
        let s = seq(10, 2);
        assert!(extract_window(&s, 0, 4, 1).is_err());
    }

    #[test]
    fn flip_is_involution() {
        let sk = Skeleton::h36m_17();
        let pose = Pose2D {
            coords: (0..17)
                .map(|i| [0.1 * i as f64 - 0.5, 0.05 * i as f64])
                .collect(),
        };
        let twice = horizontal_flip_2d(&horizontal_flip_2d(&pose, &sk), &sk);
        assert_eq!(twice, pose);
    }

    #[test]
    fn flip_symmetric_pose_is_fixed_point() {
        let sk = Skeleton::toy(3); // pair (1, 2)
        let pose = Pose2D {
            coords: vec![[0.0, 0.3], [0.0, 0.5], [0.0, 0.5]],
        };
        assert_eq!(horizontal_flip_2d(&pose, &sk), pose);
    }

    #[test]
    fn flip_toy_pair_swap() {
        let sk = Skeleton::toy(3);
        let pose = Pose2D {
            coords: vec![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]],
        };
        let f = horizontal_flip_2d(&pose, &sk);
        assert_eq!(f.coords, vec![[-1.0, 2.0], [-5.0, 6.0], [-3.0, 4.0]]);
    }
}
