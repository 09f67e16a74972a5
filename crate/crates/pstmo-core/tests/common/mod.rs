#![allow(dead_code)]
#![allow(clippy::needless_range_loop)]

//! Shared fixtures for the integration and acceptance suites: synthetic
//! corpora, desk-scale run configurations, and the finite-difference
//! gradient oracle (independent of the tape's analytic backward path).

use pstmo_core::dataset::{Dataset, Normalization};
use pstmo_core::masking::MaskStrategy;
use pstmo_core::model::{ModelPass, ParameterStore};
use pstmo_core::pose::SequenceLabels;
use pstmo_core::synth::{synth_generate, synth_generate_subject};
use pstmo_core::train::{RunConfig, SplitMode};
use pstmo_core::Tensor;
use pstmo_core::{MaskConfig, ModelConfig, OptimConfig, Skeleton, Variant};

pub const ACTIONS: [&str; 4] = ["walk", "sit", "wave", "turn"];

/// K synthetic sequences of T frames on the 17-joint skeleton.
pub fn synth_dataset(k: usize, t: usize, seed: u64) -> Dataset {
    let skeleton = Skeleton::h36m_17();
    let sequences = (0..k)
        .map(|i| {
            let labels = SequenceLabels {
                subject: format!("s{:02}", i),
                action: ACTIONS[i % ACTIONS.len()].to_string(),
                camera: "c0".to_string(),
            };
            synth_generate(&skeleton, t, seed.wrapping_add(i as u64), labels).unwrap()
        })
        .collect();
    Dataset {
        skeleton,
        normalization: Normalization {
            width: 1000,
            height: 1000,
        },
        sequences,
    }
}

/// K sequences sharing one body (bone lengths), differing in motion; the
/// multi-take single-subject corpus the pre-training criterion uses.
pub fn synth_subject_dataset(k: usize, t: usize, body_seed: u64, seed: u64) -> Dataset {
    let skeleton = Skeleton::h36m_17();
    let sequences = (0..k)
        .map(|i| {
            let labels = SequenceLabels {
                subject: "s00".to_string(),
                action: ACTIONS[i % ACTIONS.len()].to_string(),
                camera: "c0".to_string(),
            };
            synth_generate_subject(&skeleton, t, body_seed, seed.wrapping_add(i as u64), labels)
                .unwrap()
                .0
        })
        .collect();
    Dataset {
        skeleton,
        normalization: Normalization {
            width: 1000,
            height: 1000,
        },
        sequences,
    }
}

/// Small model used by the training-based criteria.
pub fn desk_model(frames: usize, latent: usize) -> ModelConfig {
    let mut cfg = ModelConfig::desk(frames, 17, latent, 4).unwrap();
    cfg.dropout = 0.0;
    cfg
}

pub fn desk_run(model: ModelConfig, seed: u64) -> RunConfig {
    RunConfig {
        model,
        mask: MaskConfig {
            q_t: 0.8,
            m_s: 2,
            strategy: MaskStrategy::SpatioTemporal,
        },
        optim: OptimConfig::default(),
        stride: 1,
        lambda: 1.0,
        seed,
        eval_every: 1,
        eval_flip: false,
        val_fraction: 0.2,
        split: SplitMode::BySequence,
        workers: 2,
        grad_clip: None,
        data_dir: String::new(),
    }
}

/// Central finite difference of `loss` at one parameter coordinate,
/// evaluated by rebuilding the full forward pass on perturbed copies of the
/// store. Everything runs in f64.
pub fn finite_difference<F>(
    store: &ParameterStore,
    name: &str,
    index: usize,
    h: f64,
    loss: F,
) -> f64
where
    F: Fn(&ParameterStore) -> f64,
{
    let eval = |delta: f64| {
        let mut perturbed = store.clone();
        let mut tensor = perturbed.get(name).unwrap().clone();
        tensor.data_mut()[index] += delta;
        perturbed.set(name, tensor).unwrap();
        loss(&perturbed)
    };
    (eval(h) - eval(-h)) / (2.0 * h)
}

/// Richardson-extrapolated central difference: combines steps `h` and `h/2`
/// to cancel the O(h²) truncation term while keeping `h` large enough that
/// f64 cancellation noise in the loss stays far below the tolerance.
pub fn finite_difference_richardson<F>(
    store: &ParameterStore,
    name: &str,
    index: usize,
    h: f64,
    loss: F,
) -> f64
where
    F: Fn(&ParameterStore) -> f64 + Copy,
{
    let coarse = finite_difference(store, name, index, h, loss);
    let fine = finite_difference(store, name, index, h / 2.0, loss);
    (4.0 * fine - coarse) / 3.0
}

/// Tiny config for the gradient-correctness criterion: N=9, J=5, d=16.
pub fn gradcheck_model() -> ModelConfig {
    ModelConfig {
        frames: 9,
        joints: 5,
        latent_dim: 16,
        heads: 2,
        sem_blocks: 1,
        tem_layers: 2,
        decoder_layers: 1,
        mofa_layers: 2,
        conv_kernel: 3,
        ffn_expansion: 2,
        dropout: 0.0,
        variant: Variant::Custom,
    }
}

/// Eval-mode stage-II prediction used by several criteria.
pub fn predict_center_simple(
    store: &ParameterStore,
    cfg: &ModelConfig,
    inputs: &[f64],
) -> Vec<f64> {
    let mut pass = ModelPass::new(store, cfg, None);
    let x = pass.input(inputs);
    let out = pass.stmo_forward(x).unwrap();
    pass.value(out.y_center).data().to_vec()
}

// ---------------------------------------------------------------------------
// Flip-equivariant parameter construction (group averaging over the
// horizontal-flip group of order two). Used as an oracle: a symmetrized
// stage-II model satisfies model(flip(x)) == flip(model(x)) exactly, which
// pins down the flip conventions of training and evaluation.
// ---------------------------------------------------------------------------

/// A signed permutation, stored as an involution `perm` with per-slot signs
/// constant on swap orbits.
#[derive(Clone, Debug)]
pub struct SignedPerm {
    pub perm: Vec<usize>,
    pub sign: Vec<f64>,
}

impl SignedPerm {
    /// Flip action on a `[.., 2J]` 2D pose row: x negated, mirrored joints
    /// swapped.
    pub fn input_flip(skeleton: &pstmo_core::Skeleton) -> SignedPerm {
        Self::pose_flip(skeleton, 2)
    }

    /// Flip action on a `[.., 3J]` 3D pose row.
    pub fn output_flip(skeleton: &pstmo_core::Skeleton) -> SignedPerm {
        Self::pose_flip(skeleton, 3)
    }

    fn pose_flip(skeleton: &pstmo_core::Skeleton, dim: usize) -> SignedPerm {
        let j = skeleton.num_joints();
        let mut mirror: Vec<usize> = (0..j).collect();
        for &(l, r) in &skeleton.lr_pairs {
            mirror[l] = r;
            mirror[r] = l;
        }
        let mut perm = Vec::with_capacity(j * dim);
        let mut sign = Vec::with_capacity(j * dim);
        for q in 0..j {
            for c in 0..dim {
                perm.push(mirror[q] * dim + c);
                sign.push(if c == 0 { -1.0 } else { 1.0 });
            }
        }
        SignedPerm { perm, sign }
    }

    /// Pure permutation on the latent: swap feature pairs (2i, 2i+1).
    /// Head blocks are preserved whenever the per-head width is even.
    pub fn latent_pairs(d: usize) -> SignedPerm {
        assert_eq!(d % 2, 0, "latent width must be even for the pair action");
        let perm = (0..d).map(|i| i ^ 1).collect();
        SignedPerm {
            perm,
            sign: vec![1.0; d],
        }
    }

    /// Block-diagonal repetition for the grouped convolution input `[M*d]`.
    pub fn repeat_blocks(&self, m: usize) -> SignedPerm {
        let d = self.perm.len();
        let mut perm = Vec::with_capacity(m * d);
        let mut sign = Vec::with_capacity(m * d);
        for block in 0..m {
            for i in 0..d {
                perm.push(block * d + self.perm[i]);
                sign.push(self.sign[i]);
            }
        }
        SignedPerm { perm, sign }
    }

    pub fn len(&self) -> usize {
        self.perm.len()
    }

    /// `v · T`: new[c] = v[perm[c]] * sign[c].
    pub fn apply_vec(&self, v: &[f64]) -> Vec<f64> {
        (0..v.len())
            .map(|c| v[self.perm[c]] * self.sign[c])
            .collect()
    }
}

/// `W <- (W + A·W·B) / 2` for a `[in, out]` matrix; the result satisfies
/// `A·W·B = W`, i.e. the linear map is flip-equivariant.
fn symmetrize_matrix(w: &Tensor, a: &SignedPerm, b: &SignedPerm) -> Tensor {
    let (rows, cols) = (w.shape()[0], w.shape()[1]);
    assert_eq!(rows, a.len());
    assert_eq!(cols, b.len());
    let mut out = Tensor::zeros(&[rows, cols]);
    for r in 0..rows {
        for c in 0..cols {
            let conjugated = a.sign[r] * w.data()[a.perm[r] * cols + b.perm[c]] * b.sign[c];
            out.data_mut()[r * cols + c] = 0.5 * (w.data()[r * cols + c] + conjugated);
        }
    }
    out
}

fn symmetrize_vec(v: &Tensor, b: &SignedPerm) -> Tensor {
    let halved: Vec<f64> = v
        .data()
        .iter()
        .zip(b.apply_vec(v.data()))
        .map(|(x, y)| 0.5 * (x + y))
        .collect();
    Tensor::from_vec(v.shape(), halved)
}

/// Group-averages every stage-II parameter so the model commutes with
/// horizontal flipping: `model(flip(x)) = flip(model(x))` exactly.
pub fn symmetrize_for_flip(
    store: &ParameterStore,
    cfg: &ModelConfig,
    skeleton: &pstmo_core::Skeleton,
) -> ParameterStore {
    assert_eq!(
        cfg.head_dim() % 2,
        0,
        "per-head width must be even for the pair action"
    );
    let f_in = SignedPerm::input_flip(skeleton);
    let f_out = SignedPerm::output_flip(skeleton);
    let p = SignedPerm::latent_pairs(cfg.latent_dim);
    let p_ffn = SignedPerm::latent_pairs(cfg.ffn_width());
    let p_conv = p.repeat_blocks(cfg.conv_kernel);

    let mut out = store.clone();
    let names: Vec<String> = store.names().map(String::from).collect();
    for name in names {
        let tensor = store.get(&name).unwrap().clone();
        let replaced = if name == "sem.proj.weight" {
            symmetrize_matrix(&tensor, &f_in, &p)
        } else if name.ends_with(".lin1.weight") {
            symmetrize_matrix(&tensor, &p, &p_ffn)
        } else if name.ends_with(".lin2.weight") {
            symmetrize_matrix(&tensor, &p_ffn, &p)
        } else if name.ends_with(".conv1.weight") {
            symmetrize_matrix(&tensor, &p_conv, &p_ffn)
        } else if name.ends_with(".conv2.weight") {
            symmetrize_matrix(&tensor, &p_ffn, &p)
        } else if name.starts_with("head.") && name.ends_with(".weight") {
            symmetrize_matrix(&tensor, &p, &f_out)
        } else if name.ends_with(".weight") {
            // Attention projections and everything else latent-to-latent.
            symmetrize_matrix(&tensor, &p, &p)
        } else if name.starts_with("head.") && name.ends_with(".bias") {
            symmetrize_vec(&tensor, &f_out)
        } else if name.ends_with(".lin1.bias") || name.ends_with(".conv1.bias") {
            symmetrize_vec(&tensor, &p_ffn)
        } else if name.contains("pos.table") {
            let (rows, cols) = (tensor.shape()[0], tensor.shape()[1]);
            let mut t = tensor.clone();
            for r in 0..rows {
                let row: Vec<f64> = t.row(r).to_vec();
                let sym = p.apply_vec(&row);
                for c in 0..cols {
                    t.data_mut()[r * cols + c] = 0.5 * (row[c] + sym[c]);
                }
            }
            t
        } else {
            // Latent-width biases, norm scales and shifts.
            symmetrize_vec(&tensor, &p)
        };
        out.set(&name, replaced).unwrap();
    }
    out
}
