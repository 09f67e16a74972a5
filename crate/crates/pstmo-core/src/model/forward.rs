//! Forward passes for both stages, built on the autodiff tape.
//!
//! A [`ModelPass`] owns one tape, the parameter leaves for one window, and
//! optionally a dropout generator (training mode) and an attention recorder.
//! Calling `backward` afterwards yields gradients aligned with the parameter
//! store order.

use indexmap::IndexMap;
use rand_chacha::ChaCha8Rng;

use crate::error::{ensure, Result};
use crate::masking::MaskPlan;
use crate::tape::{Tape, ValueId};
use crate::tensor::Tensor;

use super::config::{ModelConfig, Stage};
use super::params::ParameterStore;

/// One recorded attention matrix.
#[derive(Clone, Debug)]
pub struct AttentionDump {
    pub stage: Stage,
    pub module: String,
    pub layer: usize,
    pub head: usize,
    /// Row-stochastic `[T_q, T_k]` weights.
    pub matrix: Tensor,
    /// For the stage-I decoder: the (unmasked, masked) block boundary, so
    /// the four-quadrant structure of the map stays recoverable.
    pub partition: Option<(usize, usize)>,
}

/// Collects attention matrices during a forward pass.
#[derive(Default, Debug)]
pub struct AttnRecorder {
    pub dumps: Vec<AttentionDump>,
}

/// Outputs of a stage-II forward pass; ids can be inspected on the tape.
pub struct StmoOutputs {
    pub sem_out: ValueId,
    pub tem_out: ValueId,
    pub mofa_out: ValueId,
    /// `[N, 3J]` multi-frame prediction from the TEM features.
    pub y_all: ValueId,
    /// `[1, 3J]` center-frame prediction from the aggregated feature.
    pub y_center: ValueId,
}

pub struct ModelPass {
    tape: Tape,
    ids: IndexMap<String, ValueId>,
    shapes: Vec<Vec<usize>>,
    cfg: ModelConfig,
    stage: Stage,
    dropout_rng: Option<ChaCha8Rng>,
    recorder: Option<AttnRecorder>,
}

impl ModelPass {
    /// Registers every parameter as a tape leaf. Pass a generator to enable
    /// dropout (training mode); `None` runs in eval mode.
    pub fn new(store: &ParameterStore, cfg: &ModelConfig, dropout_rng: Option<ChaCha8Rng>) -> Self {
        let mut tape = Tape::new();
        let mut ids = IndexMap::with_capacity(store.len());
        let mut shapes = Vec::with_capacity(store.len());
        for (name, tensor) in store.iter() {
            shapes.push(tensor.shape().to_vec());
            ids.insert(name.to_string(), tape.leaf(tensor.clone()));
        }
        ModelPass {
            tape,
            ids,
            shapes,
            cfg: cfg.clone(),
            stage: store.stage(),
            dropout_rng,
            recorder: None,
        }
    }

    pub fn record_attention(&mut self) {
        self.recorder = Some(AttnRecorder::default());
    }

    pub fn take_dumps(&mut self) -> Vec<AttentionDump> {
        self.recorder.take().map(|r| r.dumps).unwrap_or_default()
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    pub fn value(&self, id: ValueId) -> &Tensor {
        self.tape.value(id)
    }

    pub fn shape(&self, id: ValueId) -> &[usize] {
        self.tape.shape(id)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// Registers a window `[N, J*2]` as a constant input.
    pub fn input(&mut self, window: &[f64]) -> ValueId {
        let n = self.cfg.frames;
        let w = self.cfg.input_width();
        assert_eq!(window.len(), n * w, "window buffer does not match config");
        self.tape.leaf(Tensor::from_vec(&[n, w], window.to_vec()))
    }

    /// Gradients for every parameter, in store order; parameters the loss
    /// never touched get zeros.
    pub fn backward(&self, loss: ValueId) -> Vec<Tensor> {
        let grads = self.tape.backward(loss);
        self.ids
            .values()
            .zip(&self.shapes)
            .map(|(&id, shape)| grads.get_or_zeros(id, shape))
            .collect()
    }

    fn p(&self, name: &str) -> ValueId {
        *self
            .ids
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} not registered for this stage"))
    }

    fn linear(&mut self, x: ValueId, prefix: &str) -> ValueId {
        let w = self.p(&format!("{prefix}.weight"));
        let b = self.p(&format!("{prefix}.bias"));
        let y = self.tape.matmul(x, w);
        self.tape.add_bias(y, b)
    }

    fn layer_norm(&mut self, x: ValueId, prefix: &str) -> ValueId {
        let gamma = self.p(&format!("{prefix}.gamma"));
        let beta = self.p(&format!("{prefix}.beta"));
        self.tape.layer_norm(x, gamma, beta)
    }

    fn maybe_dropout(&mut self, x: ValueId) -> ValueId {
        match (&mut self.dropout_rng, self.cfg.dropout) {
            (Some(rng), p) if p > 0.0 => self.tape.dropout(x, p, rng),
            _ => x,
        }
    }

    /// `lin1 -> GELU -> dropout -> lin2 -> dropout`, the feed-forward core
    /// shared by SEM blocks and transformer layers.
    fn feed_forward(&mut self, x: ValueId, lin1: &str, lin2: &str) -> ValueId {
        let h = self.linear(x, lin1);
        let h = self.tape.gelu(h);
        let h = self.maybe_dropout(h);
        let h = self.linear(h, lin2);
        self.maybe_dropout(h)
    }

    fn mhsa(
        &mut self,
        x: ValueId,
        prefix: &str,
        module: &str,
        layer: usize,
        partition: Option<(usize, usize)>,
    ) -> ValueId {
        let dk = self.cfg.head_dim();
        let q = self.linear(x, &format!("{prefix}.attn.q"));
        let k = self.linear(x, &format!("{prefix}.attn.k"));
        let v = self.linear(x, &format!("{prefix}.attn.v"));
        let scale = 1.0 / (dk as f64).sqrt();
        let mut heads = Vec::with_capacity(self.cfg.heads);
        for h in 0..self.cfg.heads {
            let qh = self.tape.slice_cols(q, h * dk, dk);
            let kh = self.tape.slice_cols(k, h * dk, dk);
            let vh = self.tape.slice_cols(v, h * dk, dk);
            let scores = self.tape.matmul_nt(qh, kh);
            let scores = self.tape.scale(scores, scale);
            let attn = self.tape.softmax_rows(scores);
            if let Some(rec) = &mut self.recorder {
                rec.dumps.push(AttentionDump {
                    stage: self.stage,
                    module: module.to_string(),
                    layer,
                    head: h,
                    matrix: self.tape.value(attn).clone(),
                    partition,
                });
            }
            let attn = self.maybe_dropout(attn);
            heads.push(self.tape.matmul(attn, vh));
        }
        let merged = self.tape.concat_cols(&heads);
        self.linear(merged, &format!("{prefix}.attn.proj"))
    }

    /// Pre-norm encoder layer: `x + MHSA(LN(x))`, then `x + FFN(LN(x))`.
    fn transformer_layer(
        &mut self,
        x: ValueId,
        prefix: &str,
        module: &str,
        layer: usize,
        partition: Option<(usize, usize)>,
    ) -> ValueId {
        let normed = self.layer_norm(x, &format!("{prefix}.norm1"));
        let attn = self.mhsa(normed, prefix, module, layer, partition);
        let x = self.tape.add(x, attn);
        let normed = self.layer_norm(x, &format!("{prefix}.norm2"));
        let ffn = self.feed_forward(
            normed,
            &format!("{prefix}.ffn.lin1"),
            &format!("{prefix}.ffn.lin2"),
        );
        self.tape.add(x, ffn)
    }

    /// Per-frame MLP: input projection then residual sub-blocks, weights
    /// shared across frames. `[T, 2J] -> [T, d]` for any `T`.
    pub fn sem_forward(&mut self, x: ValueId) -> ValueId {
        let mut h = self.linear(x, "sem.proj");
        for block in 0..self.cfg.sem_blocks {
            let prefix = format!("sem.block{block}");
            let normed = self.layer_norm(h, &format!("{prefix}.norm"));
            let ffn =
                self.feed_forward(normed, &format!("{prefix}.lin1"), &format!("{prefix}.lin2"));
            h = self.tape.add(h, ffn);
        }
        h
    }

    /// Replaces masked joints with the shared spatial pad vector; one mask
    /// set per row of `x`.
    pub fn apply_spatial_padding(&mut self, x: ValueId, masks: &[Vec<usize>]) -> ValueId {
        if masks.iter().all(|m| m.is_empty()) {
            return x;
        }
        let pad = self.p("mask.e_s");
        self.tape.replace_joints(x, masks.to_vec(), pad)
    }

    /// Transformer encoder over frame latents. `positions` gives each row's
    /// original window index into the learned positional table.
    pub fn tem_forward(&mut self, x: ValueId, positions: &[usize]) -> Result<ValueId> {
        let rows = self.tape.shape(x)[0];
        ensure!(
            positions.len() == rows,
            Shape,
            "got {} positions for {rows} frames",
            positions.len()
        );
        ensure!(
            positions.iter().all(|&p| p < self.cfg.frames),
            Validation,
            "window position exceeds positional table of length {}",
            self.cfg.frames
        );
        let table = self.p("enc_pos.table");
        let pos = self.tape.gather_rows(table, positions.to_vec());
        let mut h = self.tape.add(x, pos);
        for layer in 0..self.cfg.tem_layers {
            h = self.transformer_layer(h, &format!("tem.layer{layer}"), "tem", layer, None);
        }
        Ok(self.layer_norm(h, "tem.norm"))
    }

    /// Stage-aware encoder: spatial padding, masked-frame drop, SEM, TEM.
    /// With an empty plan this is exactly `sem_forward` then `tem_forward`
    /// over the full window.
    pub fn encoder_forward(&mut self, window: ValueId, plan: &MaskPlan) -> Result<ValueId> {
        let n = self.cfg.frames;
        ensure!(
            plan.num_frames() == n,
            Shape,
            "plan covers {} frames, window has {n}",
            plan.num_frames()
        );
        if self.stage == Stage::Finetune {
            ensure!(
                plan.is_empty(),
                Validation,
                "fine-tuning expects an empty mask plan"
            );
        }
        ensure!(
            plan.num_unmasked() > 0,
            Validation,
            "every frame is masked; encoder has no input"
        );
        let x = if plan.is_empty() {
            window
        } else {
            let survivors = self.tape.gather_rows(window, plan.unmasked_order.clone());
            self.apply_spatial_padding(survivors, &plan.spatial_masks)
        };
        let latents = self.sem_forward(x);
        self.tem_forward(latents, &plan.unmasked_order)
    }

    /// Stage-I decoder: appends temporal pad embeddings for the masked
    /// frames, restores positions through the decoder positional table, runs
    /// the decoder layers and the 2D head, and returns rows in original
    /// frame order, `[N, 2J]`.
    pub fn decoder_forward(&mut self, encoded: ValueId, plan: &MaskPlan) -> Result<ValueId> {
        let n = self.cfg.frames;
        ensure!(
            plan.num_frames() == n,
            Shape,
            "plan covers {} frames, expected {n}",
            plan.num_frames()
        );
        let a = self.tape.shape(encoded)[0];
        ensure!(
            a == plan.num_unmasked(),
            Shape,
            "encoder produced {a} frames, plan has {} unmasked",
            plan.num_unmasked()
        );
        let b = n - a;
        let z = if b > 0 {
            let e_t = self.p("mask.e_t");
            let pads = self.tape.broadcast_row(e_t, b);
            self.tape.concat_rows(encoded, pads)
        } else {
            encoded
        };
        let mut slot_positions = plan.unmasked_order.clone();
        slot_positions.extend_from_slice(&plan.masked_frames);
        let table = self.p("dec_pos.table");
        let pos = self.tape.gather_rows(table, slot_positions.clone());
        let mut h = self.tape.add(z, pos);
        for layer in 0..self.cfg.decoder_layers {
            h = self.transformer_layer(h, &format!("dec.layer{layer}"), "dec", layer, Some((a, b)));
        }
        let h = self.layer_norm(h, "dec.norm");
        let y = self.linear(h, "dec.head");
        // Undo the [unmasked || masked] slot layout.
        let mut inverse = vec![0usize; n];
        for (slot, &frame) in slot_positions.iter().enumerate() {
            inverse[frame] = slot;
        }
        Ok(self.tape.gather_rows(y, inverse))
    }

    /// Full stage-I pass: encoder over the masked window, decoder back to a
    /// `[N, 2J]` reconstruction.
    pub fn pretrain_forward(&mut self, window: ValueId, plan: &MaskPlan) -> Result<ValueId> {
        ensure!(
            self.stage == Stage::Pretrain,
            Validation,
            "pretrain_forward needs a stage-I store"
        );
        let encoded = self.encoder_forward(window, plan)?;
        self.decoder_forward(encoded, plan)
    }

    /// Strided many-to-one aggregation `[N, d] -> [1, d]`: per layer, a
    /// residual attention sub-layer followed by a kernel-M stride-M temporal
    /// convolution to the hidden width and a pointwise map back to d. The
    /// convolution changes the temporal length, so it carries no residual.
    pub fn mofa_forward(&mut self, x: ValueId) -> Result<ValueId> {
        let m = self.cfg.conv_kernel;
        let d = self.cfg.latent_dim;
        let mut h = x;
        for layer in 0..self.cfg.mofa_layers {
            let len = self.tape.shape(h)[0];
            ensure!(
                len.is_multiple_of(m),
                Validation,
                "MOFA layer {layer}: length {len} not divisible by kernel {m}"
            );
            let prefix = format!("mofa.layer{layer}");
            let normed = self.layer_norm(h, &format!("{prefix}.norm1"));
            let attn = self.mhsa(normed, &prefix, "mofa", layer, None);
            h = self.tape.add(h, attn);
            let normed = self.layer_norm(h, &format!("{prefix}.norm2"));
            // Stride == kernel makes the convolution a block reshape.
            let grouped = self.tape.reshape(normed, &[len / m, m * d]);
            h = self.feed_forward(
                grouped,
                &format!("{prefix}.conv1"),
                &format!("{prefix}.conv2"),
            );
        }
        Ok(self.layer_norm(h, "mofa.norm"))
    }

    /// Reconstruction MSE against a constant target (stage-I objective).
    pub fn mse_loss(&mut self, pred: ValueId, target: &Tensor) -> ValueId {
        self.tape.mse(pred, target)
    }

    /// Mean per-joint L2 against a constant `[.., 3J]` target.
    pub fn joint_norm_loss(&mut self, pred: ValueId, target: &Tensor) -> ValueId {
        self.tape.joint_norm_mean(pred, target, 3)
    }

    /// `single + lambda * multiple`.
    pub fn combine_losses(&mut self, single: ValueId, multiple: ValueId, lambda: f64) -> ValueId {
        self.tape.add_scaled(single, multiple, lambda)
    }

    /// Full stage-II pass over an unmasked window.
    ///
    /// The 3D heads regress in meters and the outputs are scaled to
    /// millimeters, so weights initialized at std 0.02 already produce
    /// poses at target magnitude and the reference learning rates behave.
    pub fn stmo_forward(&mut self, window: ValueId) -> Result<StmoOutputs> {
        const MM_PER_METER: f64 = 1e3;
        ensure!(
            self.stage == Stage::Finetune,
            Validation,
            "stmo_forward needs a stage-II store"
        );
        let plan = MaskPlan::empty(self.cfg.frames);
        // Retrace the encoder pieces so callers can inspect both stages.
        let x = window;
        let sem_out = self.sem_forward(x);
        let tem_out = self.tem_forward(sem_out, &plan.unmasked_order)?;
        let y_all = self.linear(tem_out, "head.multi");
        let y_all = self.tape.scale(y_all, MM_PER_METER);
        let mofa_out = self.mofa_forward(tem_out)?;
        let y_center = self.linear(mofa_out, "head.center");
        let y_center = self.tape.scale(y_center, MM_PER_METER);
        Ok(StmoOutputs {
            sem_out,
            tem_out,
            mofa_out,
            y_all,
            y_center,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masking::{build_plan, MaskConfig, MaskStrategy};
    use crate::rng::{derive, Stream};

    fn cfg() -> ModelConfig {
        let mut c = ModelConfig::desk(9, 5, 16, 2).unwrap();
        c.dropout = 0.0;
        c
    }

    fn window(cfg: &ModelConfig, seed: u64) -> Vec<f64> {
        use rand::Rng;
        let mut rng = derive(seed, Stream::Synth, &[99]);
        (0..cfg.frames * cfg.input_width())
            .map(|_| rng.gen_range(-0.8..0.8))
            .collect()
    }

    #[test]
    fn sem_is_framewise_and_shapes_match() {
        let cfg = cfg();
        let store = ParameterStore::new_stage2(&cfg, 3).unwrap();
        let mut pass = ModelPass::new(&store, &cfg, None);
        let mut w = window(&cfg, 1);
        // Make frames 0 and 4 identical.
        let width = cfg.input_width();
        let frame0: Vec<f64> = w[..width].to_vec();
        w[4 * width..5 * width].copy_from_slice(&frame0);
        let x = pass.input(&w);
        let out = pass.sem_forward(x);
        assert_eq!(pass.shape(out), &[9, 16]);
        let v = pass.value(out);
        assert_eq!(
            v.row(0),
            v.row(4),
            "shared weights must map equal frames equally"
        );
    }

    #[test]
    fn sem_single_frame_matches_batched_row() {
        let cfg = cfg();
        let store = ParameterStore::new_stage2(&cfg, 3).unwrap();
        let w = window(&cfg, 2);
        let mut pass = ModelPass::new(&store, &cfg, None);
        let x = pass.input(&w);
        let batched = pass.sem_forward(x);
        let batched_row = pass.value(batched).row(3).to_vec();

        let mut single_pass = ModelPass::new(&store, &cfg, None);
        let width = cfg.input_width();
        let one = Tensor::from_vec(&[1, width], w[3 * width..4 * width].to_vec());
        let xid = single_pass.tape.leaf(one);
        let single = single_pass.sem_forward(xid);
        assert_eq!(single_pass.value(single).row(0), &batched_row[..]);
    }

    #[test]
    fn encoder_processes_only_unmasked_frames() {
        let cfg = cfg();
        let store = ParameterStore::new_stage1(&cfg, 3).unwrap();
        let mut pass = ModelPass::new(&store, &cfg, None);
        let w = window(&cfg, 3);
        let x = pass.input(&w);
        let mask_cfg = MaskConfig {
            q_t: 0.5,
            m_s: 1,
            strategy: MaskStrategy::SpatioTemporal,
        };
        let plan = build_plan(
            &mask_cfg,
            cfg.frames,
            cfg.joints,
            &mut derive(5, Stream::MaskPlan, &[]),
        )
        .unwrap();
        let enc = pass.encoder_forward(x, &plan).unwrap();
        assert_eq!(pass.shape(enc), &[plan.num_unmasked(), cfg.latent_dim]);
    }

    #[test]
    fn empty_plan_encoder_equals_sem_then_tem() {
        let cfg = cfg();
        let store = ParameterStore::new_stage1(&cfg, 3).unwrap();
        let w = window(&cfg, 4);
        let plan = MaskPlan::empty(cfg.frames);

        let mut a = ModelPass::new(&store, &cfg, None);
        let xa = a.input(&w);
        let enc = a.encoder_forward(xa, &plan).unwrap();

        let mut b = ModelPass::new(&store, &cfg, None);
        let xb = b.input(&w);
        let sem = b.sem_forward(xb);
        let tem = b.tem_forward(sem, &plan.unmasked_order).unwrap();

        assert_eq!(a.value(enc), b.value(tem));
    }

    #[test]
    fn decoder_restores_frame_order_and_shape() {
        let cfg = cfg();
        let store = ParameterStore::new_stage1(&cfg, 3).unwrap();
        let mut pass = ModelPass::new(&store, &cfg, None);
        let w = window(&cfg, 5);
        let x = pass.input(&w);
        let mask_cfg = MaskConfig {
            q_t: 0.6,
            m_s: 0,
            strategy: MaskStrategy::Temporal,
        };
        let plan = build_plan(
            &mask_cfg,
            cfg.frames,
            cfg.joints,
            &mut derive(6, Stream::MaskPlan, &[]),
        )
        .unwrap();
        let recon = pass.pretrain_forward(x, &plan).unwrap();
        assert_eq!(pass.shape(recon), &[cfg.frames, cfg.input_width()]);
    }

    #[test]
    fn decoder_without_masks_takes_encoder_output_directly() {
        let cfg = cfg();
        let store = ParameterStore::new_stage1(&cfg, 3).unwrap();
        let mut pass = ModelPass::new(&store, &cfg, None);
        let w = window(&cfg, 6);
        let x = pass.input(&w);
        let plan = MaskPlan::empty(cfg.frames);
        let before = pass.tape.len();
        let enc = pass.encoder_forward(x, &plan).unwrap();
        let _ = before;
        let recon = pass.decoder_forward(enc, &plan).unwrap();
        assert_eq!(pass.shape(recon), &[cfg.frames, cfg.input_width()]);
    }

    #[test]
    fn fully_masked_window_rejected() {
        let cfg = cfg();
        let store = ParameterStore::new_stage1(&cfg, 3).unwrap();
        let mut pass = ModelPass::new(&store, &cfg, None);
        let w = window(&cfg, 7);
        let x = pass.input(&w);
        let plan = MaskPlan {
            masked_frames: (0..cfg.frames).collect(),
            unmasked_order: vec![],
            spatial_masks: vec![],
        };
        assert!(pass.encoder_forward(x, &plan).is_err());
    }

    #[test]
    fn stmo_shapes_and_distinct_heads() {
        let cfg = cfg();
        let store = ParameterStore::new_stage2(&cfg, 3).unwrap();
        let mut pass = ModelPass::new(&store, &cfg, None);
        let w = window(&cfg, 8);
        let x = pass.input(&w);
        let out = pass.stmo_forward(x).unwrap();
        assert_eq!(pass.shape(out.sem_out), &[9, 16]);
        assert_eq!(pass.shape(out.tem_out), &[9, 16]);
        assert_eq!(pass.shape(out.mofa_out), &[1, 16]);
        assert_eq!(pass.shape(out.y_all), &[9, 15]);
        assert_eq!(pass.shape(out.y_center), &[1, 15]);
        // Center row of the multi-frame head differs from the center head.
        let center_from_all = pass.value(out.y_all).row(4).to_vec();
        assert_ne!(center_from_all, pass.value(out.y_center).row(0).to_vec());
    }

    #[test]
    fn mofa_lengths_follow_kernel_powers() {
        let cfg = cfg();
        let store = ParameterStore::new_stage2(&cfg, 3).unwrap();
        let mut pass = ModelPass::new(&store, &cfg, None);
        pass.record_attention();
        let w = window(&cfg, 9);
        let x = pass.input(&w);
        let _ = pass.stmo_forward(x).unwrap();
        let dumps = pass.take_dumps();
        let mofa_shapes: Vec<usize> = dumps
            .iter()
            .filter(|d| d.module == "mofa" && d.head == 0)
            .map(|d| d.matrix.rows())
            .collect();
        assert_eq!(mofa_shapes, vec![9, 3]);
    }

    #[test]
    fn degenerate_single_frame_model_passes_through() {
        // N = 1, kernel 1, zero MOFA layers: the aggregator is shape-preserving.
        let cfg = ModelConfig {
            frames: 1,
            joints: 5,
            latent_dim: 16,
            heads: 2,
            sem_blocks: 1,
            tem_layers: 1,
            decoder_layers: 1,
            mofa_layers: 0,
            conv_kernel: 1,
            ffn_expansion: 2,
            dropout: 0.0,
            variant: crate::model::Variant::Custom,
        };
        cfg.validate().unwrap();
        let store = ParameterStore::new_stage2(&cfg, 3).unwrap();
        let mut pass = ModelPass::new(&store, &cfg, None);
        let w: Vec<f64> = (0..cfg.input_width()).map(|i| 0.05 * i as f64).collect();
        let x = pass.input(&w);
        let out = pass.stmo_forward(x).unwrap();
        assert_eq!(pass.shape(out.mofa_out), &[1, 16]);
        assert_eq!(pass.shape(out.y_center), &[1, 15]);
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let cfg = cfg();
        let store = ParameterStore::new_stage2(&cfg, 3).unwrap();
        let mut pass = ModelPass::new(&store, &cfg, None);
        pass.record_attention();
        let w = window(&cfg, 10);
        let x = pass.input(&w);
        let _ = pass.stmo_forward(x).unwrap();
        for dump in pass.take_dumps() {
            for r in 0..dump.matrix.rows() {
                let sum: f64 = dump.matrix.row(r).iter().sum();
                assert!(
                    (sum - 1.0).abs() < 1e-5,
                    "{}/{}/{} row {r} sums to {sum}",
                    dump.module,
                    dump.layer,
                    dump.head
                );
            }
        }
    }

    #[test]
    fn forward_is_deterministic_in_eval_mode() {
        let cfg = cfg();
        let store = ParameterStore::new_stage2(&cfg, 3).unwrap();
        let w = window(&cfg, 11);
        let run = || {
            let mut pass = ModelPass::new(&store, &cfg, None);
            let x = pass.input(&w);
            let out = pass.stmo_forward(x).unwrap();
            pass.value(out.y_center).clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn sem_permutation_equivariance() {
        let cfg = cfg();
        let store = ParameterStore::new_stage2(&cfg, 3).unwrap();
        let w = window(&cfg, 12);
        let width = cfg.input_width();
        let mut permuted = vec![0.0; w.len()];
        let perm: Vec<usize> = (0..cfg.frames).rev().collect();
        for (dst, &src) in perm.iter().enumerate() {
            permuted[dst * width..(dst + 1) * width]
                .copy_from_slice(&w[src * width..(src + 1) * width]);
        }
        let mut a = ModelPass::new(&store, &cfg, None);
        let xa = a.input(&w);
        let ya = a.sem_forward(xa);
        let mut b = ModelPass::new(&store, &cfg, None);
        let xb = b.input(&permuted);
        let yb = b.sem_forward(xb);
        for (dst, &src) in perm.iter().enumerate() {
            assert_eq!(a.value(ya).row(src), b.value(yb).row(dst));
        }
    }

    #[test]
    fn zero_heads_give_zero_outputs() {
        let cfg = cfg();
        let mut store = ParameterStore::new_stage2(&cfg, 3).unwrap();
        for name in [
            "head.center.weight",
            "head.center.bias",
            "head.multi.weight",
            "head.multi.bias",
        ] {
            let zero = Tensor::zeros(store.tensor(name).shape());
            store.set(name, zero).unwrap();
        }
        let mut pass = ModelPass::new(&store, &cfg, None);
        let w = window(&cfg, 13);
        let x = pass.input(&w);
        let out = pass.stmo_forward(x).unwrap();
        assert!(pass.value(out.y_all).data().iter().all(|&v| v == 0.0));
        assert!(pass.value(out.y_center).data().iter().all(|&v| v == 0.0));
    }
}
