//! Training objectives and evaluation metrics.
//!
//! Losses: reconstruction MSE for stage I, mean per-joint L2 for the center
//! frame, its multi-frame variant, and their λ-weighted sum. Metrics: MPJPE,
//! Procrustes-aligned MPJPE (similarity alignment, scale included), PCK at
//! 150mm and AUC over the 0:5:150mm threshold grid.
//!
//! Everything here is a pure function over flat row-major arrays; the tape
//! ops in [`crate::tape`] mirror the loss formulas for training.

use std::collections::BTreeMap;
use std::io::Write;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

/// Scalar loss with its named components.
#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct LossValue {
    pub total: f64,
    pub single: Option<f64>,
    pub multiple: Option<f64>,
    pub pretrain: Option<f64>,
}

/// Stage-I objective: mean squared error over all `N·J·2` coordinates of the
/// reconstruction against the clean window.
pub fn pretrain_loss(recon: &[f64], clean: &[f64]) -> Result<LossValue> {
    ensure!(
        recon.len() == clean.len(),
        Shape,
        "reconstruction and target lengths differ"
    );
    ensure!(!recon.is_empty(), Shape, "empty reconstruction");
    let mse = recon
        .iter()
        .zip(clean)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        / recon.len() as f64;
    Ok(LossValue {
        total: mse,
        pretrain: Some(mse),
        ..Default::default()
    })
}

fn mean_joint_norm(pred: &[f64], gt: &[f64], dim: usize) -> f64 {
    let joints = pred.len() / dim;
    let mut sum = 0.0;
    for q in 0..joints {
        let mut sq = 0.0;
        for c in 0..dim {
            sq += (pred[q * dim + c] - gt[q * dim + c]).powi(2);
        }
        sum += sq.sqrt();
    }
    sum / joints as f64
}

/// Center-frame loss: `(1/J) Σ ‖y_i − ŷ_i‖₂` over one `J×3` pose.
pub fn loss_single(pred: &[f64], gt: &[f64]) -> Result<LossValue> {
    ensure!(
        pred.len() == gt.len(),
        Shape,
        "prediction and target lengths differ"
    );
    ensure!(
        !pred.is_empty() && pred.len().is_multiple_of(3),
        Shape,
        "pose buffer must hold (x,y,z) triples"
    );
    let v = mean_joint_norm(pred, gt, 3);
    Ok(LossValue {
        total: v,
        single: Some(v),
        ..Default::default()
    })
}

/// Multi-frame loss: the same per-joint L2, averaged over all `N·J` joints.
pub fn loss_multiple(pred: &[f64], gt: &[f64]) -> Result<LossValue> {
    loss_single(pred, gt).map(|v| LossValue {
        total: v.total,
        single: None,
        multiple: Some(v.total),
        pretrain: None,
    })
}

/// Combined stage-II objective `single + λ·multiple`.
pub fn total_loss(single: &LossValue, multiple: &LossValue, lambda: f64) -> Result<LossValue> {
    ensure!(
        lambda >= 0.0,
        Validation,
        "balance factor must be nonnegative, got {lambda}"
    );
    Ok(LossValue {
        total: single.total + lambda * multiple.total,
        single: Some(single.total),
        multiple: Some(multiple.total),
        pretrain: None,
    })
}

/// Mean per-joint position error in millimeters over `K` stacked `J×3`
/// poses.
pub fn mpjpe(pred: &[f64], gt: &[f64]) -> Result<f64> {
    ensure!(
        pred.len() == gt.len(),
        Shape,
        "prediction and target lengths differ"
    );
    ensure!(
        !pred.is_empty() && pred.len().is_multiple_of(3),
        Shape,
        "pose buffer must hold (x,y,z) triples"
    );
    Ok(mean_joint_norm(pred, gt, 3))
}

/// Similarity transform `aligned = scale · R · (p − centroid_p) + centroid_g`.
#[derive(Clone, Copy, Debug)]
pub struct Similarity {
    pub scale: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Similarity {
    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let v = self.scale * (self.rotation * Vector3::new(p[0], p[1], p[2])) + self.translation;
        [v.x, v.y, v.z]
    }
}

fn centroid(points: &[f64]) -> Vector3<f64> {
    let j = points.len() / 3;
    let mut c = Vector3::zeros();
    for q in 0..j {
        c += Vector3::new(points[3 * q], points[3 * q + 1], points[3 * q + 2]);
    }
    c / j as f64
}

/// Rejects clouds whose centered points are (numerically) collinear or
/// coincident — the optimal rotation is not unique there.
fn check_nondegenerate(points: &[f64], what: &str) -> Result<()> {
    let j = points.len() / 3;
    ensure!(
        j >= 3,
        Validation,
        "{what}: need at least 3 joints for alignment, got {j}"
    );
    let c = centroid(points);
    let mut gram = Matrix3::zeros();
    for q in 0..j {
        let v = Vector3::new(points[3 * q], points[3 * q + 1], points[3 * q + 2]) - c;
        gram += v * v.transpose();
    }
    let mut eig: Vec<f64> = gram.symmetric_eigen().eigenvalues.iter().copied().collect();
    eig.sort_by(|a, b| b.partial_cmp(a).unwrap());
    ensure!(
        eig[0] > 0.0 && eig[1] > eig[0] * 1e-12,
        Validation,
        "{what}: joints are collinear or coincident; alignment is degenerate"
    );
    Ok(())
}

/// Closed-form similarity Procrustes: finds `(s, R, t)` minimizing
/// `Σ ‖gt_i − (s·R·pred_i + t)‖²` with `det(R) = +1`, via SVD of the
/// cross-covariance; the smallest singular direction is sign-corrected when
/// the unconstrained optimum would be a reflection. Returns the aligned
/// points and the transform.
pub fn procrustes_align(pred: &[f64], gt: &[f64]) -> Result<(Vec<f64>, Similarity)> {
    ensure!(
        pred.len() == gt.len(),
        Shape,
        "prediction and target lengths differ"
    );
    ensure!(
        pred.len().is_multiple_of(3),
        Shape,
        "pose buffer must hold (x,y,z) triples"
    );
    check_nondegenerate(pred, "prediction")?;
    check_nondegenerate(gt, "ground truth")?;
    let j = pred.len() / 3;
    let mu_p = centroid(pred);
    let mu_g = centroid(gt);

    // Cross-covariance H = Σ (p−μp)(g−μg)ᵀ and the spread of the source.
    let mut h = Matrix3::zeros();
    let mut var_p = 0.0;
    for q in 0..j {
        let p = Vector3::new(pred[3 * q], pred[3 * q + 1], pred[3 * q + 2]) - mu_p;
        let g = Vector3::new(gt[3 * q], gt[3 * q + 1], gt[3 * q + 2]) - mu_g;
        h += p * g.transpose();
        var_p += p.norm_squared();
    }
    let svd = h.svd(true, true);
    let u = svd.u.expect("svd requested u");
    let v_t = svd.v_t.expect("svd requested v_t");
    let v = v_t.transpose();
    let det_sign = (v * u.transpose()).determinant().signum();
    let d = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, det_sign));
    let rotation = v * d * u.transpose();
    let sv = svd.singular_values;
    let scale = (sv[0] + sv[1] + det_sign * sv[2]) / var_p;
    let translation = mu_g - scale * (rotation * mu_p);
    let transform = Similarity {
        scale,
        rotation,
        translation,
    };

    let mut aligned = Vec::with_capacity(pred.len());
    for q in 0..j {
        let a = transform.apply([pred[3 * q], pred[3 * q + 1], pred[3 * q + 2]]);
        aligned.extend_from_slice(&a);
    }
    Ok((aligned, transform))
}

/// MPJPE after per-frame Procrustes alignment; `pred` and `gt` hold `K`
/// stacked `J×3` poses.
pub fn p_mpjpe(pred: &[f64], gt: &[f64], joints: usize) -> Result<f64> {
    ensure!(
        pred.len() == gt.len(),
        Shape,
        "prediction and target lengths differ"
    );
    let frame = joints * 3;
    ensure!(
        frame > 0 && pred.len().is_multiple_of(frame),
        Shape,
        "buffer is not a whole number of poses"
    );
    let mut sum = 0.0;
    let frames = pred.len() / frame;
    for k in 0..frames {
        let p = &pred[k * frame..(k + 1) * frame];
        let g = &gt[k * frame..(k + 1) * frame];
        let (aligned, _) = procrustes_align(p, g)?;
        sum += mean_joint_norm(&aligned, g, 3);
    }
    Ok(sum / frames as f64)
}

/// Threshold grid for AUC: 0, 5, ..., 150mm (31 points).
pub const PCK_THRESHOLDS: usize = 31;

fn pck_threshold(i: usize) -> f64 {
    5.0 * i as f64
}

/// Percentage of joints within 150mm, and mean PCK over the threshold grid.
pub fn pck_auc(pred: &[f64], gt: &[f64]) -> Result<(f64, f64)> {
    ensure!(
        pred.len() == gt.len(),
        Shape,
        "prediction and target lengths differ"
    );
    ensure!(
        !pred.is_empty() && pred.len().is_multiple_of(3),
        Shape,
        "pose buffer must hold (x,y,z) triples"
    );
    let mut hits = [0u64; PCK_THRESHOLDS];
    let joints = pred.len() / 3;
    for q in 0..joints {
        let mut sq = 0.0;
        for c in 0..3 {
            sq += (pred[q * 3 + c] - gt[q * 3 + c]).powi(2);
        }
        let dist = sq.sqrt();
        for (i, hit) in hits.iter_mut().enumerate() {
            if dist <= pck_threshold(i) {
                *hit += 1;
            }
        }
    }
    let pck150 = 100.0 * hits[PCK_THRESHOLDS - 1] as f64 / joints as f64;
    let auc = hits
        .iter()
        .map(|&h| 100.0 * h as f64 / joints as f64)
        .sum::<f64>()
        / PCK_THRESHOLDS as f64;
    Ok((pck150, auc))
}

/// The four headline numbers.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricValues {
    pub mpjpe: f64,
    pub p_mpjpe: f64,
    pub pck150: f64,
    pub auc: f64,
}

/// Aggregated evaluation result: pooled over all frames (the primary
/// number), per action, and the unweighted mean over actions.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct MetricReport {
    pub pooled: MetricValues,
    pub per_action: BTreeMap<String, MetricValues>,
    pub action_mean: MetricValues,
    pub frames: usize,
}

impl MetricReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialization cannot fail")
    }

    /// Per-action CSV: `action,mpjpe,p_mpjpe,pck150,auc`, with a final
    /// pooled row labeled `__all__`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "action,mpjpe,p_mpjpe,pck150,auc")?;
        for (action, v) in &self.per_action {
            writeln!(
                w,
                "{action},{},{},{},{}",
                v.mpjpe, v.p_mpjpe, v.pck150, v.auc
            )?;
        }
        let v = &self.pooled;
        writeln!(
            w,
            "__all__,{},{},{},{}",
            v.mpjpe, v.p_mpjpe, v.pck150, v.auc
        )?;
        Ok(())
    }
}

#[derive(Clone, Default)]
struct Bucket {
    sum_dist: f64,
    sum_aligned_dist: f64,
    joints: u64,
    frames: u64,
    hits: [u64; PCK_THRESHOLDS],
}

impl Bucket {
    fn values(&self) -> MetricValues {
        let joints = self.joints.max(1) as f64;
        MetricValues {
            mpjpe: self.sum_dist / joints,
            p_mpjpe: self.sum_aligned_dist / joints,
            pck150: 100.0 * self.hits[PCK_THRESHOLDS - 1] as f64 / joints,
            auc: self
                .hits
                .iter()
                .map(|&h| 100.0 * h as f64 / joints)
                .sum::<f64>()
                / PCK_THRESHOLDS as f64,
        }
    }

    fn merge(&mut self, other: &Bucket) {
        self.sum_dist += other.sum_dist;
        self.sum_aligned_dist += other.sum_aligned_dist;
        self.joints += other.joints;
        self.frames += other.frames;
        for (a, b) in self.hits.iter_mut().zip(&other.hits) {
            *a += b;
        }
    }
}

/// Streams per-frame predictions into per-action and pooled aggregates.
#[derive(Default)]
pub struct MetricAccumulator {
    buckets: BTreeMap<String, Bucket>,
}

impl MetricAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds one predicted center pose (`J×3` flat, millimeters).
    pub fn add(&mut self, action: &str, pred: &[f64], gt: &[f64]) -> Result<()> {
        ensure!(
            pred.len() == gt.len(),
            Shape,
            "prediction and target lengths differ"
        );
        let joints = pred.len() / 3;
        let bucket = self.buckets.entry(action.to_string()).or_default();
        let (aligned, _) = procrustes_align(pred, gt)?;
        for q in 0..joints {
            let mut sq = 0.0;
            let mut sq_aligned = 0.0;
            for c in 0..3 {
                sq += (pred[q * 3 + c] - gt[q * 3 + c]).powi(2);
                sq_aligned += (aligned[q * 3 + c] - gt[q * 3 + c]).powi(2);
            }
            let dist = sq.sqrt();
            bucket.sum_dist += dist;
            bucket.sum_aligned_dist += sq_aligned.sqrt();
            for (i, hit) in bucket.hits.iter_mut().enumerate() {
                if dist <= pck_threshold(i) {
                    *hit += 1;
                }
            }
        }
        bucket.joints += joints as u64;
        bucket.frames += 1;
        Ok(())
    }

    pub fn report(&self) -> MetricReport {
        let mut pooled = Bucket::default();
        let mut per_action = BTreeMap::new();
        for (action, bucket) in &self.buckets {
            pooled.merge(bucket);
            per_action.insert(action.clone(), bucket.values());
        }
        let n_actions = per_action.len().max(1) as f64;
        let mut action_mean = MetricValues::default();
        for v in per_action.values() {
            action_mean.mpjpe += v.mpjpe / n_actions;
            action_mean.p_mpjpe += v.p_mpjpe / n_actions;
            action_mean.pck150 += v.pck150 / n_actions;
            action_mean.auc += v.auc / n_actions;
        }
        MetricReport {
            pooled: pooled.values(),
            per_action,
            action_mean,
            frames: pooled.frames as usize,
        }
    }
}
