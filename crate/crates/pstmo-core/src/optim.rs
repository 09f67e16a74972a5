//! Adam optimizer and the per-epoch exponential learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::model::ParameterStore;
use crate::tensor::Tensor;

/// Optimization hyperparameters for both stages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    pub lr0_stage1: f64,
    pub lr0_stage2: f64,
    /// Multiplicative decay applied after each epoch.
    pub lr_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub epochs_stage1: usize,
    pub epochs_stage2: usize,
    pub batch_size: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr0_stage1: 1e-4,
            lr0_stage2: 7e-4,
            lr_decay: 0.97,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            epochs_stage1: 80,
            epochs_stage2: 80,
            batch_size: 160,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.lr0_stage1 > 0.0 && self.lr0_stage2 > 0.0,
            Validation,
            "learning rates must be positive"
        );
        ensure!(
            (0.0..=1.0).contains(&self.lr_decay) && self.lr_decay > 0.0,
            Validation,
            "decay must be in (0,1]"
        );
        ensure!(
            (0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2),
            Validation,
            "betas must be in [0,1)"
        );
        ensure!(self.epsilon > 0.0, Validation, "epsilon must be positive");
        ensure!(
            self.batch_size >= 1,
            Validation,
            "batch size must be at least 1"
        );
        Ok(())
    }
}

/// `lr0 · decay^epoch`.
pub fn lr_schedule(epoch: usize, lr0: f64, decay: f64) -> f64 {
    lr0 * decay.powi(epoch as i32)
}

/// Adam with bias correction; state tensors are aligned with the parameter
/// store order.
pub struct Adam {
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    steps: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParameterStore, cfg: &OptimConfig) -> Self {
        let zeros: Vec<Tensor> = store
            .iter()
            .map(|(_, t)| Tensor::zeros(t.shape()))
            .collect();
        Adam {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            epsilon: cfg.epsilon,
            steps: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// One update; `grads` aligned with the store order.
    pub fn step(&mut self, store: &mut ParameterStore, grads: &[Tensor], lr: f64) {
        assert_eq!(
            grads.len(),
            self.m.len(),
            "gradient count does not match state"
        );
        self.steps += 1;
        let bc1 = 1.0 - self.beta1.powi(self.steps as i32);
        let bc2 = 1.0 - self.beta2.powi(self.steps as i32);
        let mut deltas = Vec::with_capacity(grads.len());
        for ((m, v), g) in self.m.iter_mut().zip(self.v.iter_mut()).zip(grads) {
            let mut delta = Tensor::zeros(g.shape());
            for i in 0..g.len() {
                let gi = g.data()[i];
                m.data_mut()[i] = self.beta1 * m.data()[i] + (1.0 - self.beta1) * gi;
                v.data_mut()[i] = self.beta2 * v.data()[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = m.data()[i] / bc1;
                let vhat = v.data()[i] / bc2;
                delta.data_mut()[i] = -mhat / (vhat.sqrt() + self.epsilon);
            }
            deltas.push(delta);
        }
        store.apply_delta(&deltas, lr);
    }

    /// Moment buffers for checkpointing, aligned with store order.
    pub fn state(&self) -> (&[Tensor], &[Tensor]) {
        (&self.m, &self.v)
    }

    pub fn restore(&mut self, m: Vec<Tensor>, v: Vec<Tensor>, steps: u64) {
        assert_eq!(m.len(), self.m.len());
        assert_eq!(v.len(), self.v.len());
        self.m = m;
        self.v = v;
        self.steps = steps;
    }
}
