//! Two-stage 2D-to-3D human pose lifting at desk scale.
//!
//! Stage I pre-trains a spatial-temporal encoder by masked pose modeling:
//! frames and joints of a 2D pose window are randomly masked and a small
//! decoder reconstructs the clean window. Stage II reuses the encoder,
//! appends a strided-convolution frame aggregator, and regresses the 3D pose
//! of the window's center frame. Everything — the autodiff engine, the
//! optimizer, metrics, complexity accounting — lives in this crate; the
//! companion CLI crate wires it into reproducible runs.

// Index loops over several strided buffers at once read better than
// iterator chains in the numerical kernels below.
#![allow(clippy::needless_range_loop)]

pub mod analysis;
pub mod augment;
pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod masking;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod pose;
pub mod rng;
pub mod skeleton;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod train;

pub use dataset::{load_dataset, save_dataset, Dataset, DatasetManifest, Normalization};
pub use error::{Error, Result};
pub use masking::{build_plan, combined_ratio, MaskConfig, MaskPlan, MaskStrategy};
pub use metrics::MetricReport;
pub use model::{ModelConfig, ParameterStore, Stage, Variant};
pub use optim::OptimConfig;
pub use pose::{Pose2D, Pose3D, PoseSequence, WindowSample};
pub use skeleton::Skeleton;
pub use tensor::Tensor;
pub use train::RunConfig;
