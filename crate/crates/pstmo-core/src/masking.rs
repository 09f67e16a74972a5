//! Masking strategies for masked pose modeling: temporal, spatial, and the
//! combined spatio-temporal scheme.
//!
//! The plan produced here is pure bookkeeping — index sets only. Substituting
//! masked slots with learnable pad vectors happens inside the model so these
//! samplers stay parameter-free and trivially testable.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

/// Which masking scheme a plan follows.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskStrategy {
    Temporal,
    Spatial,
    SpatioTemporal,
}

/// Masking hyperparameters: temporal masking ratio `q_T` and the fixed
/// number of masked joints per frame `m_S` (so `q_S = m_S / J`).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskConfig {
    pub q_t: f64,
    pub m_s: usize,
    pub strategy: MaskStrategy,
}

impl Default for MaskConfig {
    fn default() -> Self {
        MaskConfig {
            q_t: 0.8,
            m_s: 2,
            strategy: MaskStrategy::SpatioTemporal,
        }
    }
}

impl MaskConfig {
    pub fn validate(&self, num_joints: usize) -> Result<()> {
        ensure!(
            (0.0..1.0).contains(&self.q_t),
            Validation,
            "temporal masking ratio must be in [0,1), got {}",
            self.q_t
        );
        ensure!(
            self.m_s <= num_joints,
            Validation,
            "cannot mask {} joints of {num_joints}",
            self.m_s
        );
        match self.strategy {
            MaskStrategy::Temporal => {
                ensure!(
                    self.m_s == 0,
                    Validation,
                    "temporal strategy requires m_s = 0"
                )
            }
            MaskStrategy::Spatial => {
                ensure!(
                    self.q_t == 0.0,
                    Validation,
                    "spatial strategy requires q_t = 0"
                )
            }
            MaskStrategy::SpatioTemporal => {}
        }
        Ok(())
    }

    pub fn q_s(&self, num_joints: usize) -> f64 {
        self.m_s as f64 / num_joints as f64
    }
}

/// A sampled mask for one window.
///
/// The wire form is `{"masked_frames":[...],"spatial_masks":[[...],...]}`;
/// the surviving order is the complement of `masked_frames` over the window
/// and is rebuilt on deserialization (the window length is recoverable as
/// `masked_frames.len() + spatial_masks.len()`).
#[derive(Clone, Debug, PartialEq)]
pub struct MaskPlan {
    /// Window-relative indices of masked frames, ascending.
    pub masked_frames: Vec<usize>,
    /// Surviving frame indices in original order.
    pub unmasked_order: Vec<usize>,
    /// Masked joint indices per surviving frame; `spatial_masks[k]` belongs
    /// to frame `unmasked_order[k]`.
    pub spatial_masks: Vec<Vec<usize>>,
}

#[derive(Serialize, Deserialize)]
struct MaskPlanWire {
    masked_frames: Vec<usize>,
    spatial_masks: Vec<Vec<usize>>,
}

impl Serialize for MaskPlan {
    fn serialize<S: serde::Serializer>(
        &self,
        serializer: S,
    ) -> std::result::Result<S::Ok, S::Error> {
        MaskPlanWire {
            masked_frames: self.masked_frames.clone(),
            spatial_masks: self.spatial_masks.clone(),
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for MaskPlan {
    fn deserialize<D: serde::Deserializer<'de>>(
        deserializer: D,
    ) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let wire = MaskPlanWire::deserialize(deserializer)?;
        let n = wire.masked_frames.len() + wire.spatial_masks.len();
        let mut masked_flag = vec![false; n];
        for &f in &wire.masked_frames {
            if f >= n || masked_flag[f] {
                return Err(D::Error::custom(format!("invalid masked frame index {f}")));
            }
            masked_flag[f] = true;
        }
        let unmasked_order: Vec<usize> = (0..n).filter(|&f| !masked_flag[f]).collect();
        Ok(MaskPlan {
            masked_frames: wire.masked_frames,
            unmasked_order,
            spatial_masks: wire.spatial_masks,
        })
    }
}

impl MaskPlan {
    /// Plan under which nothing is masked; fine-tuning uses this.
    pub fn empty(n: usize) -> Self {
        MaskPlan {
            masked_frames: Vec::new(),
            unmasked_order: (0..n).collect(),
            spatial_masks: vec![Vec::new(); n],
        }
    }

    pub fn num_frames(&self) -> usize {
        self.masked_frames.len() + self.unmasked_order.len()
    }

    pub fn num_unmasked(&self) -> usize {
        self.unmasked_order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masked_frames.is_empty() && self.spatial_masks.iter().all(|m| m.is_empty())
    }

    /// Serialized fixture form: `{"masked_frames":[...],"spatial_masks":[[...]]}`.
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("plan serialization cannot fail")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let plan: MaskPlan = serde_json::from_str(text)?;
        Ok(plan)
    }
}

/// Number of frames the encoder keeps: `a = ⌊(1 − q_T)·N⌋`.
///
/// The tiny nudge compensates for the binary representation of `q_T` so
/// that exact-rational products floor correctly: (1−0.8)·10 evaluates to
/// 1.9999999999999996 in f64 and must still count as 2.
pub fn unmasked_count(n: usize, q_t: f64) -> usize {
    (((1.0 - q_t) * n as f64) + 1e-9).floor() as usize
}

/// Samples the temporal mask set `M_T`: `N − ⌊(1−q_T)·N⌋` distinct frame
/// indices, uniform without replacement. Returned ascending.
pub fn sample_temporal_mask(n: usize, q_t: f64, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
    ensure!(n >= 1, Validation, "window length must be at least 1");
    ensure!(
        (0.0..1.0).contains(&q_t),
        Validation,
        "temporal masking ratio must be in [0,1), got {q_t}"
    );
    let keep = unmasked_count(n, q_t);
    let masked = n - keep;
    let mut indices: Vec<usize> = (0..n).collect();
    indices.shuffle(rng);
    let mut chosen: Vec<usize> = indices[..masked].to_vec();
    chosen.sort_unstable();
    Ok(chosen)
}

/// Samples one spatial mask set per frame, each of exactly `m_s` distinct
/// joints, independently across frames.
pub fn sample_spatial_masks(
    num_frames: usize,
    num_joints: usize,
    m_s: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<usize>>> {
    ensure!(
        m_s <= num_joints,
        Validation,
        "cannot mask {m_s} joints of {num_joints}"
    );
    let mut out = Vec::with_capacity(num_frames);
    for _ in 0..num_frames {
        let mut joints: Vec<usize> = (0..num_joints).collect();
        joints.shuffle(rng);
        let mut chosen: Vec<usize> = joints[..m_s].to_vec();
        chosen.sort_unstable();
        out.push(chosen);
    }
    Ok(out)
}

/// Combined spatio-temporal masking ratio `q_T + (1 − q_T)·q_S`.
pub fn combined_ratio(q_t: f64, q_s: f64) -> f64 {
    q_t + (1.0 - q_t) * q_s
}

/// Builds a full plan: temporal masking first, then spatial masking over the
/// surviving frames only.
pub fn build_plan(
    config: &MaskConfig,
    n: usize,
    num_joints: usize,
    rng: &mut ChaCha8Rng,
) -> Result<MaskPlan> {
    config.validate(num_joints)?;
    let masked_frames = match config.strategy {
        MaskStrategy::Spatial => Vec::new(),
        _ => sample_temporal_mask(n, config.q_t, rng)?,
    };
    let mut masked_flag = vec![false; n];
    for &f in &masked_frames {
        masked_flag[f] = true;
    }
    let unmasked_order: Vec<usize> = (0..n).filter(|&f| !masked_flag[f]).collect();
    let spatial_masks = match config.strategy {
        MaskStrategy::Temporal => vec![Vec::new(); unmasked_order.len()],
        _ => sample_spatial_masks(unmasked_order.len(), num_joints, config.m_s, rng)?,
    };
    Ok(MaskPlan {
        masked_frames,
        unmasked_order,
        spatial_masks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{derive, Stream};

    fn rng(seed: u64) -> ChaCha8Rng {
        derive(seed, Stream::MaskPlan, &[])
    }

    #[test]
    fn reference_cardinalities() {
        // 243 frames at 80% leave exactly 48 = floor(48.6) survivors.
        let masked = sample_temporal_mask(243, 0.8, &mut rng(0)).unwrap();
        assert_eq!(masked.len(), 195);
        assert_eq!(unmasked_count(243, 0.8), 48);
        // 90% leaves floor(24.3) = 24.
        assert_eq!(unmasked_count(243, 0.9), 24);
        assert_eq!(
            sample_temporal_mask(243, 0.9, &mut rng(0)).unwrap().len(),
            219
        );
    }

    #[test]
    fn zero_ratio_masks_nothing() {
        assert!(sample_temporal_mask(10, 0.0, &mut rng(1))
            .unwrap()
            .is_empty());
    }

    #[test]
    fn full_ratio_rejected() {
        assert!(sample_temporal_mask(10, 1.0, &mut rng(1)).is_err());
    }

    #[test]
    fn temporal_mask_indices_distinct_and_in_range() {
        for seed in 0..20 {
            let masked = sample_temporal_mask(37, 0.6, &mut rng(seed)).unwrap();
            assert!(masked.windows(2).all(|w| w[0] < w[1]));
            assert!(masked.iter().all(|&i| i < 37));
        }
    }

    #[test]
    fn spatial_mask_sizes_exact() {
        let masks = sample_spatial_masks(50, 17, 7, &mut rng(2)).unwrap();
        assert_eq!(masks.len(), 50);
        for m in &masks {
            assert_eq!(m.len(), 7);
            assert!(m.windows(2).all(|w| w[0] < w[1]));
        }
        // m_s = 0 and m_s = J degenerate cases.
        let empty = sample_spatial_masks(5, 17, 0, &mut rng(2)).unwrap();
        assert!(empty.iter().all(|m| m.is_empty()));
        let all = sample_spatial_masks(5, 17, 17, &mut rng(2)).unwrap();
        assert!(all.iter().all(|m| m.len() == 17));
        assert!(sample_spatial_masks(5, 17, 18, &mut rng(2)).is_err());
    }

    #[test]
    fn spatial_ratio_from_masked_count() {
        let cfg = MaskConfig {
            q_t: 0.0,
            m_s: 7,
            strategy: MaskStrategy::Spatial,
        };
        assert!((cfg.q_s(17) - 7.0 / 17.0).abs() < 1e-12);
        assert!((cfg.q_s(17) - 0.4117647058823529).abs() < 1e-12);
    }

    #[test]
    fn combined_ratio_reference_values() {
        assert!((combined_ratio(0.8, 2.0 / 17.0) - 0.8235294117647058).abs() < 1e-12);
        assert_eq!(combined_ratio(0.7, 0.0), 0.7);
        assert!((combined_ratio(0.9, 7.0 / 17.0) - 0.9411764705882353).abs() < 1e-12);
    }

    #[test]
    fn plan_partitions_window() {
        for seed in 0..10 {
            let cfg = MaskConfig {
                q_t: 0.8,
                m_s: 2,
                strategy: MaskStrategy::SpatioTemporal,
            };
            let plan = build_plan(&cfg, 10, 3, &mut rng(seed)).unwrap();
            assert_eq!(plan.num_unmasked(), 2); // floor(0.2 * 10)
            assert_eq!(plan.spatial_masks.len(), 2);
            let mut union: Vec<usize> = plan
                .masked_frames
                .iter()
                .chain(&plan.unmasked_order)
                .copied()
                .collect();
            union.sort_unstable();
            assert_eq!(union, (0..10).collect::<Vec<_>>());
        }
    }

    #[test]
    fn strategy_degenerate_forms() {
        let t = MaskConfig {
            q_t: 0.5,
            m_s: 0,
            strategy: MaskStrategy::Temporal,
        };
        let plan = build_plan(&t, 8, 5, &mut rng(3)).unwrap();
        assert!(plan.spatial_masks.iter().all(|m| m.is_empty()));

        let s = MaskConfig {
            q_t: 0.0,
            m_s: 2,
            strategy: MaskStrategy::Spatial,
        };
        let plan = build_plan(&s, 8, 5, &mut rng(3)).unwrap();
        assert!(plan.masked_frames.is_empty());
        assert_eq!(plan.spatial_masks.len(), 8);
    }

    #[test]
    fn same_seed_same_plan() {
        let cfg = MaskConfig::default();
        let a = build_plan(&cfg, 243, 17, &mut rng(7)).unwrap();
        let b = build_plan(&cfg, 243, 17, &mut rng(7)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn plan_json_round_trip_uses_wire_schema() {
        let cfg = MaskConfig::default();
        let plan = build_plan(&cfg, 20, 17, &mut rng(4)).unwrap();
        let json = plan.to_json();
        let value: serde_json::Value = serde_json::from_str(&json).unwrap();
        let keys: Vec<&str> = value
            .as_object()
            .unwrap()
            .keys()
            .map(String::as_str)
            .collect();
        assert_eq!(keys, ["masked_frames", "spatial_masks"], "fixture schema");
        assert_eq!(MaskPlan::from_json(&json).unwrap(), plan);
        assert!(MaskPlan::from_json("{\"masked_frames\":[9],\"spatial_masks\":[[0]]}").is_err());
    }

    #[test]
    fn empirical_masked_fraction_matches_combined_ratio() {
        // Monte-Carlo over 1000 plans at the reference configuration.
        let cfg = MaskConfig::default();
        let (n, j) = (243, 17);
        let mut masked_joints = 0usize;
        let mut total_joints = 0usize;
        for seed in 0..1000u64 {
            let plan = build_plan(&cfg, n, j, &mut rng(seed)).unwrap();
            masked_joints += plan.masked_frames.len() * j;
            masked_joints += plan.spatial_masks.iter().map(Vec::len).sum::<usize>();
            total_joints += n * j;
        }
        let empirical = masked_joints as f64 / total_joints as f64;
        let expected = combined_ratio(cfg.q_t, cfg.q_s(j));
        assert!(
            (empirical - expected).abs() < 0.01,
            "empirical {empirical} vs expected {expected}"
        );
    }
}
