//! The learnable model: spatial encoding (SEM), temporal encoding (TEM),
//! the stage-I reconstruction decoder, the many-to-one frame aggregator
//! (MOFA), padding tokens, positional embeddings and regression heads.

mod config;
mod forward;
mod params;

pub use config::{mofa_depth_for, ModelConfig, Stage, Variant};
pub use forward::{AttentionDump, AttnRecorder, ModelPass, StmoOutputs};
pub use params::{transfer_encoder, ParameterStore};
