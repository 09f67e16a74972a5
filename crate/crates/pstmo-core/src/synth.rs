//! Synthetic skeleton motion: rigid bones driven by low-frequency sinusoidal
//! joint angles, a smoothly drifting root, and a fixed pinhole projection.
//!
//! The generator is the desk-scale data source for the whole pipeline. Its
//! contract: bone lengths are constant over time, 2D frames are exactly the
//! projection of the absolute 3D joints, and equal seeds give bit-identical
//! sequences.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{ensure, Result};
use crate::pose::{PoseSequence, SequenceLabels};
use crate::rng::{derive, Stream};
use crate::skeleton::Skeleton;

/// Normalized pinhole camera looking down +z: `u = focal·X/Z`, `v = focal·Y/Z`.
#[derive(Clone, Copy, Debug)]
pub struct PinholeCamera {
    pub focal: f64,
}

impl PinholeCamera {
    pub fn project(&self, p: [f64; 3]) -> [f64; 2] {
        [self.focal * p[0] / p[2], self.focal * p[1] / p[2]]
    }
}

/// Everything needed to re-project the generated targets in tests: the
/// camera and the absolute root trajectory that root-centering removed.
#[derive(Clone, Debug)]
pub struct SynthMotion {
    pub camera: PinholeCamera,
    pub root_path: Vec<[f64; 3]>,
}

struct Oscillator {
    base: f64,
    amplitude: f64,
    freq_hz: f64,
    phase: f64,
}

impl Oscillator {
    fn sample(rng: &mut ChaCha8Rng, base: (f64, f64), amp: (f64, f64), freq: (f64, f64)) -> Self {
        Oscillator {
            base: rng.gen_range(base.0..base.1),
            amplitude: rng.gen_range(amp.0..amp.1),
            freq_hz: rng.gen_range(freq.0..freq.1),
            phase: rng.gen_range(0.0..std::f64::consts::TAU),
        }
    }

    fn at(&self, t_sec: f64) -> f64 {
        self.base
            + self.amplitude * (std::f64::consts::TAU * self.freq_hz * t_sec + self.phase).sin()
    }
}

const FPS: f64 = 50.0;
const FOCAL: f64 = 1.15;

/// Generates `t` frames of motion for `skeleton`, returning the sequence and
/// the reprojection context. `body_seed` fixes the bone lengths, `seed` the
/// motion, so one subject can be recorded across many sequences.
pub fn synth_generate_subject(
    skeleton: &Skeleton,
    t: usize,
    body_seed: u64,
    seed: u64,
    labels: SequenceLabels,
) -> Result<(PoseSequence, SynthMotion)> {
    ensure!(t >= 1, Validation, "sequence length must be at least 1");
    skeleton.validate()?;
    let j = skeleton.num_joints();

    // Fixed body: one bone length per non-root joint.
    let mut body_rng = derive(body_seed, Stream::Synth, &[0xB0D]);
    let bone_len: Vec<f64> = (0..j)
        .map(|q| {
            if q == skeleton.root_index {
                0.0
            } else {
                body_rng.gen_range(80.0..240.0)
            }
        })
        .collect();

    let mut rng = derive(seed, Stream::Synth, &[]);

    // Root drifts around a point a few meters in front of the camera.
    let root_osc = [
        Oscillator::sample(&mut rng, (-120.0, 120.0), (40.0, 180.0), (0.1, 0.4)),
        Oscillator::sample(&mut rng, (-120.0, 120.0), (40.0, 180.0), (0.1, 0.4)),
        Oscillator::sample(&mut rng, (4200.0, 4500.0), (40.0, 150.0), (0.1, 0.4)),
    ];
    // Two spherical angles per joint, oscillating fast enough that a short
    // window sees real motion but slow against the 50 fps sampling.
    let theta_osc: Vec<Oscillator> = (0..j)
        .map(|_| Oscillator::sample(&mut rng, (0.6, 2.5), (0.1, 0.45), (0.3, 1.6)))
        .collect();
    let phi_osc: Vec<Oscillator> = (0..j)
        .map(|_| {
            Oscillator::sample(
                &mut rng,
                (0.0, std::f64::consts::TAU),
                (0.1, 0.45),
                (0.3, 1.6),
            )
        })
        .collect();

    let order = topological_order(skeleton);
    let camera = PinholeCamera { focal: FOCAL };

    let mut frames = Vec::with_capacity(t * j * 2);
    let mut targets = Vec::with_capacity(t * j * 3);
    let mut root_path = Vec::with_capacity(t);
    let mut absolute = vec![[0.0f64; 3]; j];
    for frame in 0..t {
        let sec = frame as f64 / FPS;
        let root = [
            root_osc[0].at(sec),
            root_osc[1].at(sec),
            root_osc[2].at(sec),
        ];
        absolute[skeleton.root_index] = root;
        for &q in &order {
            if q == skeleton.root_index {
                continue;
            }
            let theta = theta_osc[q].at(sec);
            let phi = phi_osc[q].at(sec);
            let dir = [
                theta.sin() * phi.cos(),
                theta.cos(),
                theta.sin() * phi.sin(),
            ];
            let parent = absolute[skeleton.parent[q]];
            absolute[q] = [
                parent[0] + bone_len[q] * dir[0],
                parent[1] + bone_len[q] * dir[1],
                parent[2] + bone_len[q] * dir[2],
            ];
        }
        root_path.push(root);
        for p in &absolute {
            let uv = camera.project(*p);
            frames.push(uv[0] as f32);
            frames.push(uv[1] as f32);
            targets.push((p[0] - root[0]) as f32);
            targets.push((p[1] - root[1]) as f32);
            targets.push((p[2] - root[2]) as f32);
        }
    }
    let seq = PoseSequence::new(frames, Some(targets), j, FPS, labels)?;
    Ok((seq, SynthMotion { camera, root_path }))
}

/// Generates a sequence whose body is derived from the motion seed.
pub fn synth_generate_with_motion(
    skeleton: &Skeleton,
    t: usize,
    seed: u64,
    labels: SequenceLabels,
) -> Result<(PoseSequence, SynthMotion)> {
    synth_generate_subject(skeleton, t, seed, seed, labels)
}

/// Generates a sequence, discarding the reprojection context.
pub fn synth_generate(
    skeleton: &Skeleton,
    t: usize,
    seed: u64,
    labels: SequenceLabels,
) -> Result<PoseSequence> {
    synth_generate_with_motion(skeleton, t, seed, labels).map(|(s, _)| s)
}

/// Joints ordered so parents always precede children.
fn topological_order(skeleton: &Skeleton) -> Vec<usize> {
    let j = skeleton.num_joints();
    let mut children: Vec<Vec<usize>> = vec![Vec::new(); j];
    for (q, &p) in skeleton.parent.iter().enumerate() {
        if q != skeleton.root_index {
            children[p].push(q);
        }
    }
    let mut order = Vec::with_capacity(j);
    let mut stack = vec![skeleton.root_index];
    while let Some(q) = stack.pop() {
        order.push(q);
        for &c in children[q].iter().rev() {
            stack.push(c);
        }
    }
    order
}
