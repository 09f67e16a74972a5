//! Architecture hyperparameters and their validation.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

/// Which optimization stage a parameter set belongs to. Stage I owns the
/// masked-pose-modeling network (encoder + decoder); stage II owns the
/// lifting network (encoder + MOFA + heads).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain,
    Finetune,
}

/// Named depth presets: `S` uses (TEM, decoder) depths (3, 2), `Full` uses
/// (4, 3). `Custom` places no constraint and is what desk-scale configs use.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    S,
    Full,
    Custom,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Window length N (odd).
    pub frames: usize,
    /// Joints per frame J.
    pub joints: usize,
    /// Latent width d.
    pub latent_dim: usize,
    /// Attention heads; must divide `latent_dim`.
    pub heads: usize,
    /// SEM sub-blocks L.
    pub sem_blocks: usize,
    /// TEM depth L1.
    pub tem_layers: usize,
    /// Stage-I decoder depth L_D.
    pub decoder_layers: usize,
    /// MOFA depth L2; `conv_kernel^mofa_layers` must equal `frames`.
    pub mofa_layers: usize,
    /// Temporal convolution kernel = stride M.
    pub conv_kernel: usize,
    /// Feed-forward hidden width as a multiple of `latent_dim`.
    pub ffn_expansion: usize,
    /// Dropout on feed-forward activations and attention weights.
    pub dropout: f64,
    pub variant: Variant,
}

impl ModelConfig {
    /// The small reference model: d=256, 8 heads, TEM depth 3, decoder depth 2.
    pub fn pstmo_s(frames: usize) -> Result<ModelConfig> {
        let cfg = ModelConfig {
            frames,
            joints: 17,
            latent_dim: 256,
            heads: 8,
            sem_blocks: 2,
            tem_layers: 3,
            decoder_layers: 2,
            mofa_layers: mofa_depth_for(frames, 3)?,
            conv_kernel: 3,
            ffn_expansion: 2,
            dropout: 0.1,
            variant: Variant::S,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// The full reference model: TEM depth 4, decoder depth 3.
    pub fn pstmo(frames: usize) -> Result<ModelConfig> {
        let mut cfg = ModelConfig::pstmo_s(frames)?;
        cfg.tem_layers = 4;
        cfg.decoder_layers = 3;
        cfg.variant = Variant::Full;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Small free-form configuration for tests and desk-scale runs.
    pub fn desk(
        frames: usize,
        joints: usize,
        latent_dim: usize,
        heads: usize,
    ) -> Result<ModelConfig> {
        let cfg = ModelConfig {
            frames,
            joints,
            latent_dim,
            heads,
            sem_blocks: 1,
            tem_layers: 2,
            decoder_layers: 1,
            mofa_layers: mofa_depth_for(frames, 3)?,
            conv_kernel: 3,
            ffn_expansion: 2,
            dropout: 0.1,
            variant: Variant::Custom,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.joints >= 2,
            Validation,
            "need at least 2 joints, got {}",
            self.joints
        );
        ensure!(
            self.frames >= 1 && self.frames % 2 == 1,
            Validation,
            "frames must be odd and positive, got {}",
            self.frames
        );
        ensure!(
            self.latent_dim >= 1,
            Validation,
            "latent width must be positive"
        );
        ensure!(
            self.heads >= 1,
            Validation,
            "need at least one attention head"
        );
        ensure!(
            self.latent_dim.is_multiple_of(self.heads),
            Validation,
            "latent width {} not divisible by {} heads",
            self.latent_dim,
            self.heads
        );
        ensure!(
            self.conv_kernel >= 1,
            Validation,
            "conv kernel must be at least 1"
        );
        ensure!(
            self.conv_kernel.checked_pow(self.mofa_layers as u32) == Some(self.frames),
            Validation,
            "MOFA must collapse the window to one frame: kernel {} ^ depth {} != {} frames",
            self.conv_kernel,
            self.mofa_layers,
            self.frames
        );
        ensure!(
            self.ffn_expansion >= 1,
            Validation,
            "feed-forward expansion must be at least 1"
        );
        ensure!(
            (0.0..1.0).contains(&self.dropout),
            Validation,
            "dropout must be in [0,1), got {}",
            self.dropout
        );
        match self.variant {
            Variant::S => ensure!(
                self.tem_layers == 3 && self.decoder_layers == 2,
                Validation,
                "variant S requires TEM/decoder depths (3, 2)"
            ),
            Variant::Full => ensure!(
                self.tem_layers == 4 && self.decoder_layers == 3,
                Validation,
                "variant Full requires TEM/decoder depths (4, 3)"
            ),
            Variant::Custom => {}
        }
        Ok(())
    }

    /// Input width per frame, `2J`.
    pub fn input_width(&self) -> usize {
        2 * self.joints
    }

    /// Feed-forward hidden width.
    pub fn ffn_width(&self) -> usize {
        self.ffn_expansion * self.latent_dim
    }

    pub fn head_dim(&self) -> usize {
        self.latent_dim / self.heads
    }

    /// Temporal lengths through MOFA, `[N, N/M, ..., 1]`.
    pub fn mofa_lengths(&self) -> Vec<usize> {
        let mut lengths = vec![self.frames];
        let mut cur = self.frames;
        for _ in 0..self.mofa_layers {
            cur /= self.conv_kernel;
            lengths.push(cur);
        }
        lengths
    }
}

/// Smallest depth whose kernel power reaches `frames` exactly.
pub fn mofa_depth_for(frames: usize, kernel: usize) -> Result<usize> {
    if frames == 1 {
        return Ok(0);
    }
    ensure!(
        kernel >= 2,
        Validation,
        "frames {frames} is not a power of kernel {kernel}"
    );
    let mut cur = 1usize;
    let mut depth = 0usize;
    while cur < frames {
        cur = cur.saturating_mul(kernel);
        depth += 1;
    }
    ensure!(
        cur == frames,
        Validation,
        "frames {frames} is not a power of kernel {kernel}"
    );
    Ok(depth)
}
