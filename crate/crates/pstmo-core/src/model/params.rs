//! The named-tensor parameter store, its initialization, and the stage-I →
//! stage-II encoder transfer.
//!
//! Canonical names are dot-separated (`sem.block0.lin1.weight`); construction
//! order is fixed, which makes initialization, checkpoints and gradient
//! layout deterministic. Weight matrices are stored `[in, out]` so a forward
//! step is `x · W + b`.

use indexmap::IndexMap;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{ensure, Result};
use crate::rng::{derive, Stream};
use crate::tensor::Tensor;

use super::config::{ModelConfig, Stage};

const INIT_STD: f64 = 0.02;

/// All learnable arrays of one stage, keyed by canonical name.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterStore {
    entries: IndexMap<String, Tensor>,
    stage: Stage,
}

struct Init<'r> {
    rng: &'r mut ChaCha8Rng,
    normal: Normal<f64>,
}

impl Init<'_> {
    /// Truncated normal: resample anything beyond two standard deviations.
    fn trunc_normal(&mut self) -> f64 {
        loop {
            let v = self.normal.sample(self.rng);
            if v.abs() <= 2.0 * INIT_STD {
                return v;
            }
        }
    }

    fn weight(&mut self, shape: &[usize]) -> Tensor {
        let mut t = Tensor::zeros(shape);
        for e in t.data_mut() {
            *e = self.trunc_normal();
        }
        t
    }
}

impl ParameterStore {
    pub fn stage(&self) -> Stage {
        self.stage
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    /// Panicking accessor for names the architecture guarantees.
    pub fn tensor(&self, name: &str) -> &Tensor {
        self.entries
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} missing from store"))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn num_scalars(&self) -> u64 {
        self.entries.values().map(|t| t.len() as u64).sum()
    }

    /// Replaces an existing entry; the shape must match.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self
            .entries
            .get_mut(name)
            .ok_or_else(|| crate::error::Error::Validation(format!("unknown parameter {name}")))?;
        ensure!(
            slot.shape() == value.shape(),
            Shape,
            "parameter {name}: stored shape {:?}, incoming {:?}",
            slot.shape(),
            value.shape()
        );
        *slot = value;
        Ok(())
    }

    /// Inserts a brand-new entry; used by checkpoint loading.
    pub(crate) fn insert_raw(&mut self, name: String, value: Tensor) {
        self.entries.insert(name, value);
    }

    pub(crate) fn empty(stage: Stage) -> Self {
        ParameterStore {
            entries: IndexMap::new(),
            stage,
        }
    }

    /// In-place update `p += alpha * delta` for every parameter, `delta`
    /// aligned with store order.
    pub fn apply_delta(&mut self, deltas: &[Tensor], alpha: f64) {
        assert_eq!(deltas.len(), self.entries.len());
        for (slot, delta) in self.entries.values_mut().zip(deltas) {
            slot.add_scaled_assign(delta, alpha);
        }
    }

    /// Stage-I parameters: encoder (SEM + TEM + positions), padding tokens,
    /// decoder and the 2D reconstruction head.
    pub fn new_stage1(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = derive(seed, Stream::Init, &[1]);
        let mut store = ParameterStore::empty(Stage::Pretrain);
        let mut init = Init {
            rng: &mut rng,
            normal: Normal::new(0.0, INIT_STD).unwrap(),
        };
        build_encoder(&mut store, cfg, &mut init);
        // Padding tokens start at zero like biases.
        store.entries.insert("mask.e_s".into(), Tensor::zeros(&[2]));
        store
            .entries
            .insert("mask.e_t".into(), Tensor::zeros(&[cfg.latent_dim]));
        store.entries.insert(
            "dec_pos.table".into(),
            init.weight(&[cfg.frames, cfg.latent_dim]),
        );
        for layer in 0..cfg.decoder_layers {
            build_transformer_layer(&mut store, cfg, &format!("dec.layer{layer}"), &mut init);
        }
        build_layer_norm(&mut store, "dec.norm", cfg.latent_dim);
        store.entries.insert(
            "dec.head.weight".into(),
            init.weight(&[cfg.latent_dim, cfg.input_width()]),
        );
        store
            .entries
            .insert("dec.head.bias".into(), Tensor::zeros(&[cfg.input_width()]));
        Ok(store)
    }

    /// Stage-II parameters: encoder, MOFA and the two 3D regression heads.
    pub fn new_stage2(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = derive(seed, Stream::Init, &[2]);
        let mut store = ParameterStore::empty(Stage::Finetune);
        let mut init = Init {
            rng: &mut rng,
            normal: Normal::new(0.0, INIT_STD).unwrap(),
        };
        build_encoder(&mut store, cfg, &mut init);
        for layer in 0..cfg.mofa_layers {
            let prefix = format!("mofa.layer{layer}");
            build_layer_norm(&mut store, &format!("{prefix}.norm1"), cfg.latent_dim);
            build_attention(&mut store, cfg, &prefix, &mut init);
            build_layer_norm(&mut store, &format!("{prefix}.norm2"), cfg.latent_dim);
            // Strided temporal convolution as a [M*d, hidden] map over
            // non-overlapping frame groups, then a pointwise map back to d.
            store.entries.insert(
                format!("{prefix}.conv1.weight"),
                init.weight(&[cfg.conv_kernel * cfg.latent_dim, cfg.ffn_width()]),
            );
            store.entries.insert(
                format!("{prefix}.conv1.bias"),
                Tensor::zeros(&[cfg.ffn_width()]),
            );
            store.entries.insert(
                format!("{prefix}.conv2.weight"),
                init.weight(&[cfg.ffn_width(), cfg.latent_dim]),
            );
            store.entries.insert(
                format!("{prefix}.conv2.bias"),
                Tensor::zeros(&[cfg.latent_dim]),
            );
        }
        build_layer_norm(&mut store, "mofa.norm", cfg.latent_dim);
        for head in ["head.center", "head.multi"] {
            store.entries.insert(
                format!("{head}.weight"),
                init.weight(&[cfg.latent_dim, 3 * cfg.joints]),
            );
            store
                .entries
                .insert(format!("{head}.bias"), Tensor::zeros(&[3 * cfg.joints]));
        }
        Ok(store)
    }
}

fn build_layer_norm(store: &mut ParameterStore, prefix: &str, width: usize) {
    store
        .entries
        .insert(format!("{prefix}.gamma"), Tensor::full(&[width], 1.0));
    store
        .entries
        .insert(format!("{prefix}.beta"), Tensor::zeros(&[width]));
}

fn build_linear(
    store: &mut ParameterStore,
    prefix: &str,
    input: usize,
    output: usize,
    init: &mut Init,
) {
    store
        .entries
        .insert(format!("{prefix}.weight"), init.weight(&[input, output]));
    store
        .entries
        .insert(format!("{prefix}.bias"), Tensor::zeros(&[output]));
}

fn build_attention(store: &mut ParameterStore, cfg: &ModelConfig, prefix: &str, init: &mut Init) {
    let d = cfg.latent_dim;
    for proj in ["q", "k", "v", "proj"] {
        build_linear(store, &format!("{prefix}.attn.{proj}"), d, d, init);
    }
}

fn build_transformer_layer(
    store: &mut ParameterStore,
    cfg: &ModelConfig,
    prefix: &str,
    init: &mut Init,
) {
    let d = cfg.latent_dim;
    build_layer_norm(store, &format!("{prefix}.norm1"), d);
    build_attention(store, cfg, prefix, init);
    build_layer_norm(store, &format!("{prefix}.norm2"), d);
    build_linear(
        store,
        &format!("{prefix}.ffn.lin1"),
        d,
        cfg.ffn_width(),
        init,
    );
    build_linear(
        store,
        &format!("{prefix}.ffn.lin2"),
        cfg.ffn_width(),
        d,
        init,
    );
}

/// SEM, the shared positional table and TEM: the part both stages share.
fn build_encoder(store: &mut ParameterStore, cfg: &ModelConfig, init: &mut Init) {
    build_linear(store, "sem.proj", cfg.input_width(), cfg.latent_dim, init);
    for block in 0..cfg.sem_blocks {
        let prefix = format!("sem.block{block}");
        build_layer_norm(store, &format!("{prefix}.norm"), cfg.latent_dim);
        build_linear(
            store,
            &format!("{prefix}.lin1"),
            cfg.latent_dim,
            cfg.ffn_width(),
            init,
        );
        build_linear(
            store,
            &format!("{prefix}.lin2"),
            cfg.ffn_width(),
            cfg.latent_dim,
            init,
        );
    }
    store.entries.insert(
        "enc_pos.table".into(),
        init.weight(&[cfg.frames, cfg.latent_dim]),
    );
    for layer in 0..cfg.tem_layers {
        build_transformer_layer(store, cfg, &format!("tem.layer{layer}"), init);
    }
    build_layer_norm(store, "tem.norm", cfg.latent_dim);
}

/// Prefixes of the arrays the two stages share.
pub const ENCODER_PREFIXES: [&str; 3] = ["sem.", "enc_pos.", "tem."];

/// Copies every shared encoder array (SEM, TEM, positional table) from a
/// stage-I store into a stage-II store, bit-exactly. Padding tokens, decoder
/// and heads are not transferred; MOFA keeps its fresh initialization.
pub fn transfer_encoder(stage1: &ParameterStore, stage2: &mut ParameterStore) -> Result<()> {
    ensure!(
        stage1.stage() == Stage::Pretrain,
        Validation,
        "source store is not a stage-I store"
    );
    ensure!(
        stage2.stage() == Stage::Finetune,
        Validation,
        "destination store is not a stage-II store"
    );
    let targets: Vec<String> = stage2
        .names()
        .filter(|n| ENCODER_PREFIXES.iter().any(|p| n.starts_with(p)))
        .map(String::from)
        .collect();
    for name in targets {
        let source = stage1.get(&name).ok_or_else(|| {
            crate::error::Error::Validation(format!("pre-trained store lacks {name}"))
        })?;
        stage2.set(&name, source.clone())?;
    }
    Ok(())
}
