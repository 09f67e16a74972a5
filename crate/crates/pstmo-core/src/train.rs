//! The two-stage optimization pipeline: masked-pose-modeling pre-training,
//! fine-tuning with the combined center/multi-frame loss, and evaluation
//! with optional test-time flip averaging.
//!
//! Determinism contract: given (seed, config, corpus), checkpoints and
//! metric files are bit-identical across runs and across worker counts.
//! Every random decision draws from a stream keyed by structured coordinates
//! (stage, epoch, window index), and every parallel reduction folds results
//! in window order.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta};
use crate::dataset::Dataset;
use crate::error::{ensure, Error, Result};
use crate::masking::{build_plan, MaskConfig};
use crate::metrics::{self, LossValue, MetricAccumulator, MetricReport, MetricValues};
use crate::model::{transfer_encoder, ModelConfig, ModelPass, ParameterStore, Stage};
use crate::optim::{lr_schedule, Adam, OptimConfig};
use crate::pose::{extract_window, flip_joint_buffer, WindowSample};
use crate::rng::{derive, Stream};
use crate::skeleton::Skeleton;
use crate::tensor::Tensor;

/// How training and validation windows are separated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    /// Hold out whole sequences (different recordings).
    BySequence,
    /// Hold out the tail of every sequence (unseen continuation of the
    /// same motions); a margin of half a window keeps validation centers
    /// clear of training targets.
    ByTime,
}

/// Everything one run needs; serialized verbatim into the run directory.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub mask: MaskConfig,
    pub optim: OptimConfig,
    /// Temporal downsampling stride s.
    pub stride: usize,
    /// Balance factor between center and multi-frame losses.
    pub lambda: f64,
    pub seed: u64,
    /// Validate (and checkpoint) every this many epochs.
    pub eval_every: usize,
    /// Two-pass flip averaging during evaluation.
    pub eval_flip: bool,
    /// Fraction of sequences (or of each sequence's tail) held out.
    pub val_fraction: f64,
    /// Validation split scheme.
    pub split: SplitMode,
    /// Thread count for data and batch parallelism; 0 uses all cores.
    pub workers: usize,
    /// Optional global-norm gradient clip; off by default.
    pub grad_clip: Option<f64>,
    /// Dataset directory; recorded for provenance, the CLI resolves it.
    pub data_dir: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::pstmo_s(243).expect("reference config is valid"),
            mask: MaskConfig::default(),
            optim: OptimConfig::default(),
            stride: 2,
            lambda: 1.0,
            seed: 0,
            eval_every: 1,
            eval_flip: true,
            val_fraction: 0.2,
            split: SplitMode::BySequence,
            workers: 0,
            grad_clip: None,
            data_dir: String::new(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.mask.validate(self.model.joints)?;
        self.optim.validate()?;
        ensure!(self.stride >= 1, Validation, "stride must be at least 1");
        ensure!(self.lambda >= 0.0, Validation, "lambda must be nonnegative");
        ensure!(
            self.eval_every >= 1,
            Validation,
            "eval cadence must be at least 1"
        );
        ensure!(
            (0.0..1.0).contains(&self.val_fraction),
            Validation,
            "val fraction must be in [0,1)"
        );
        Ok(())
    }
}

/// Windows plus the skeleton they were cut from.
pub struct WindowSet {
    pub skeleton: Skeleton,
    pub train: Vec<WindowSample>,
    pub val: Vec<WindowSample>,
}

/// Cuts every frame of every sequence into a window and separates the
/// validation split per `cfg.split`.
pub fn build_window_sets(
    ds: &Dataset,
    cfg: &RunConfig,
    require_targets: bool,
) -> Result<WindowSet> {
    ensure!(
        !ds.sequences.is_empty(),
        Validation,
        "dataset holds no sequences"
    );
    ensure!(
        ds.skeleton.num_joints() == cfg.model.joints,
        Shape,
        "dataset skeleton has {} joints, model expects {}",
        ds.skeleton.num_joints(),
        cfg.model.joints
    );
    let k = ds.sequences.len();
    let mut out = WindowSet {
        skeleton: ds.skeleton.clone(),
        train: Vec::new(),
        val: Vec::new(),
    };
    match cfg.split {
        SplitMode::BySequence => {
            let val_count = if k >= 2 {
                ((k as f64 * cfg.val_fraction).round() as usize).clamp(1, k - 1)
            } else {
                0
            };
            let split = k - val_count;
            for (i, seq) in ds.sequences.iter().enumerate() {
                if require_targets {
                    ensure!(
                        seq.has_targets(),
                        Validation,
                        "sequence {i} lacks 3D targets"
                    );
                }
                let bucket = if i < split {
                    &mut out.train
                } else {
                    &mut out.val
                };
                for center in 0..seq.num_frames() {
                    bucket.push(extract_window(seq, center, cfg.model.frames, cfg.stride)?);
                }
            }
        }
        SplitMode::ByTime => {
            let margin = (cfg.model.frames - 1) / 2 * cfg.stride;
            for (i, seq) in ds.sequences.iter().enumerate() {
                if require_targets {
                    ensure!(
                        seq.has_targets(),
                        Validation,
                        "sequence {i} lacks 3D targets"
                    );
                }
                let t = seq.num_frames();
                let boundary = ((t as f64) * (1.0 - cfg.val_fraction)).floor() as usize;
                for center in 0..boundary.min(t) {
                    out.train
                        .push(extract_window(seq, center, cfg.model.frames, cfg.stride)?);
                }
                for center in (boundary + margin).min(t)..t {
                    out.val
                        .push(extract_window(seq, center, cfg.model.frames, cfg.stride)?);
                }
            }
        }
    }
    Ok(out)
}

fn thread_pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Validation(format!("thread pool: {e}")))
}

fn mean_grads(parts: Vec<Vec<Tensor>>) -> Vec<Tensor> {
    let n = parts.len() as f64;
    let mut iter = parts.into_iter();
    let mut acc = iter.next().expect("at least one window per batch");
    for part in iter {
        for (a, g) in acc.iter_mut().zip(&part) {
            a.add_scaled_assign(g, 1.0);
        }
    }
    for a in acc.iter_mut() {
        a.scale_assign(1.0 / n);
    }
    acc
}

fn clip_grads(grads: &mut [Tensor], max_norm: f64) {
    let norm: f64 = grads
        .iter()
        .map(|g| g.data().iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            g.scale_assign(scale);
        }
    }
}

/// One stage-I batch update: fresh mask plan per window, encoder→decoder
/// forward, reconstruction MSE against the clean window, one Adam step.
/// Returns the mean batch loss.
#[allow(clippy::too_many_arguments)]
pub fn pretrain_step(
    store: &mut ParameterStore,
    adam: &mut Adam,
    cfg: &RunConfig,
    pool: &rayon::ThreadPool,
    windows: &[&WindowSample],
    epoch: usize,
    step: usize,
    window_ids: &[usize],
    lr: f64,
) -> Result<LossValue> {
    let results: Result<Vec<(f64, Vec<Tensor>)>> = pool.install(|| {
        windows
            .par_iter()
            .zip(window_ids.par_iter())
            .map(|(window, &wid)| {
                let mut mask_rng = derive(cfg.seed, Stream::MaskPlan, &[epoch as u64, wid as u64]);
                let plan =
                    build_plan(&cfg.mask, cfg.model.frames, cfg.model.joints, &mut mask_rng)?;
                let dropout = derive(cfg.seed, Stream::Dropout, &[1, epoch as u64, wid as u64]);
                let mut pass = ModelPass::new(store, &cfg.model, Some(dropout));
                let input = pass.input(&window.inputs);
                let recon = pass.pretrain_forward(input, &plan)?;
                let clean = Tensor::from_vec(
                    &[cfg.model.frames, cfg.model.input_width()],
                    window.inputs.clone(),
                );
                let loss = pass.mse_loss(recon, &clean);
                let value = pass.value(loss).item();
                Ok((value, pass.backward(loss)))
            })
            .collect()
    });
    let results = results?;
    let loss = results.iter().map(|(l, _)| l).sum::<f64>() / results.len() as f64;
    ensure!(
        loss.is_finite(),
        Numeric,
        "non-finite pre-training loss at epoch {epoch} step {step} (lr {lr:.3e})"
    );
    let mut grads = mean_grads(results.into_iter().map(|(_, g)| g).collect());
    if let Some(c) = cfg.grad_clip {
        clip_grads(&mut grads, c);
    }
    adam.step(store, &grads, lr);
    Ok(LossValue {
        total: loss,
        pretrain: Some(loss),
        ..Default::default()
    })
}

/// One stage-II batch update: optional horizontal flip on a random half of
/// the batch, full lifting forward, `single + λ·multiple` loss, Adam step.
#[allow(clippy::too_many_arguments)]
pub fn finetune_step(
    store: &mut ParameterStore,
    adam: &mut Adam,
    cfg: &RunConfig,
    pool: &rayon::ThreadPool,
    skeleton: &Skeleton,
    windows: &[&WindowSample],
    epoch: usize,
    step: usize,
    window_ids: &[usize],
    lr: f64,
) -> Result<LossValue> {
    let results: Result<Vec<(f64, f64, Vec<Tensor>)>> = pool.install(|| {
        windows
            .par_iter()
            .zip(window_ids.par_iter())
            .map(|(window, &wid)| {
                use rand::Rng;
                let mut sample: WindowSample = (*window).clone();
                let mut flip_rng = derive(cfg.seed, Stream::Flip, &[epoch as u64, wid as u64]);
                if flip_rng.gen_bool(0.5) {
                    crate::pose::flip_window(&mut sample, skeleton);
                }
                let gt_center = sample.target_center.as_ref().ok_or_else(|| {
                    Error::Validation("fine-tuning window lacks a 3D center target".into())
                })?;
                let gt_all = sample
                    .targets_all
                    .as_ref()
                    .expect("targets_all present with target_center");
                let dropout = derive(cfg.seed, Stream::Dropout, &[2, epoch as u64, wid as u64]);
                let mut pass = ModelPass::new(store, &cfg.model, Some(dropout));
                let input = pass.input(&sample.inputs);
                let out = pass.stmo_forward(input)?;
                let center_target = Tensor::from_vec(&[1, 3 * cfg.model.joints], gt_center.clone());
                let all_target =
                    Tensor::from_vec(&[cfg.model.frames, 3 * cfg.model.joints], gt_all.clone());
                let single = pass.joint_norm_loss(out.y_center, &center_target);
                let multiple = pass.joint_norm_loss(out.y_all, &all_target);
                let total = pass.combine_losses(single, multiple, cfg.lambda);
                let single_v = pass.value(single).item();
                let multiple_v = pass.value(multiple).item();
                Ok((single_v, multiple_v, pass.backward(total)))
            })
            .collect()
    });
    let results = results?;
    let n = results.len() as f64;
    let single = results.iter().map(|(s, _, _)| s).sum::<f64>() / n;
    let multiple = results.iter().map(|(_, m, _)| m).sum::<f64>() / n;
    let total = single + cfg.lambda * multiple;
    ensure!(
        total.is_finite(),
        Numeric,
        "non-finite fine-tuning loss at epoch {epoch} step {step} (lr {lr:.3e})"
    );
    let mut grads = mean_grads(results.into_iter().map(|(_, _, g)| g).collect());
    if let Some(c) = cfg.grad_clip {
        clip_grads(&mut grads, c);
    }
    adam.step(store, &grads, lr);
    Ok(LossValue {
        total,
        single: Some(single),
        multiple: Some(multiple),
        pretrain: None,
    })
}

/// Predicts the center 3D pose of one window in eval mode; with `flip` on,
/// averages the prediction with the un-flipped prediction of the flipped
/// input.
pub fn predict_center(
    store: &ParameterStore,
    model: &ModelConfig,
    skeleton: &Skeleton,
    window: &WindowSample,
    flip: bool,
) -> Result<Vec<f64>> {
    let forward = |inputs: &[f64]| -> Result<Vec<f64>> {
        let mut pass = ModelPass::new(store, model, None);
        let input = pass.input(inputs);
        let out = pass.stmo_forward(input)?;
        Ok(pass.value(out.y_center).data().to_vec())
    };
    let mut pred = forward(&window.inputs)?;
    if flip {
        let mut flipped = window.inputs.clone();
        flip_joint_buffer(&mut flipped, model.joints, 2, &skeleton.lr_pairs);
        let mut pred_flipped = forward(&flipped)?;
        flip_joint_buffer(&mut pred_flipped, model.joints, 3, &skeleton.lr_pairs);
        for (a, b) in pred.iter_mut().zip(&pred_flipped) {
            *a = 0.5 * (*a + b);
        }
    }
    Ok(pred)
}

/// Evaluates center-frame predictions over a window set.
pub fn evaluate(
    store: &ParameterStore,
    model: &ModelConfig,
    skeleton: &Skeleton,
    windows: &[WindowSample],
    flip: bool,
    pool: &rayon::ThreadPool,
) -> Result<MetricReport> {
    ensure!(!windows.is_empty(), Validation, "nothing to evaluate");
    let preds: Result<Vec<Vec<f64>>> = pool.install(|| {
        windows
            .par_iter()
            .map(|w| predict_center(store, model, skeleton, w, flip))
            .collect()
    });
    let preds = preds?;
    let mut acc = MetricAccumulator::new();
    for (window, pred) in windows.iter().zip(&preds) {
        let gt = window
            .target_center
            .as_ref()
            .ok_or_else(|| Error::Validation("evaluation window lacks a 3D target".into()))?;
        acc.add(&window.action, pred, gt)?;
    }
    Ok(acc.report())
}

// ----- run orchestration ----------------------------------------------------

/// Appends rows to `metrics.csv`: epoch, split, the four metrics, loss.
struct MetricsLog {
    file: fs::File,
}

impl MetricsLog {
    fn create(dir: &Path) -> Result<Self> {
        let mut file = fs::File::create(dir.join("metrics.csv"))?;
        writeln!(file, "epoch,split,mpjpe,p_mpjpe,pck150,auc,loss")?;
        Ok(MetricsLog { file })
    }

    fn row(
        &mut self,
        epoch: usize,
        split: &str,
        m: Option<&MetricValues>,
        loss: Option<f64>,
    ) -> Result<()> {
        let fmt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        writeln!(
            self.file,
            "{epoch},{split},{},{},{},{},{}",
            fmt(m.map(|m| m.mpjpe)),
            fmt(m.map(|m| m.p_mpjpe)),
            fmt(m.map(|m| m.pck150)),
            fmt(m.map(|m| m.auc)),
            fmt(loss)
        )?;
        Ok(())
    }
}

fn shuffled_ids(count: usize, seed: u64, stage: u64, epoch: usize) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut ids: Vec<usize> = (0..count).collect();
    let mut rng = derive(seed, Stream::Order, &[stage, epoch as u64]);
    ids.shuffle(&mut rng);
    ids
}

fn prepare_run_dir(dir: &Path, cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(dir.join("checkpoints"))?;
    fs::write(dir.join("config.json"), serde_json::to_string_pretty(cfg)?)?;
    Ok(())
}

fn progress(record: serde_json::Value) {
    println!("{record}");
}

/// How a stage-II run obtains its starting parameters.
#[derive(Clone, Copy, Debug)]
pub enum Stage2Init<'a> {
    /// Fresh initialization from the run seed.
    Scratch,
    /// Fresh MOFA and heads; encoder transferred from a stage-I checkpoint.
    Pretrained(&'a Path),
    /// Continue a stage-II run: parameters, optimizer moments and epoch
    /// counter restored, learning rate picked up at the saved epoch.
    Resume(&'a Path),
}

fn restore_optimizer(adam: &mut Adam, ckpt: &Checkpoint) {
    if let Some((m, v)) = &ckpt.optimizer {
        adam.restore(m.clone(), v.clone(), ckpt.meta.optimizer_steps);
    }
}

/// Result of a stage-I run.
pub struct Stage1Summary {
    pub best: PathBuf,
    pub last: PathBuf,
    pub final_train_loss: f64,
    pub val_losses: Vec<(usize, f64)>,
}

/// Reconstruction MSE over a window set with deterministic per-window plans
/// (seeded independently of training epochs, so values are comparable over
/// the course of a run).
pub fn masked_reconstruction_error(
    store: &ParameterStore,
    cfg: &RunConfig,
    windows: &[WindowSample],
    pool: &rayon::ThreadPool,
) -> Result<f64> {
    const EVAL_TAG: u64 = u64::MAX;
    ensure!(!windows.is_empty(), Validation, "nothing to evaluate");
    let losses: Result<Vec<f64>> = pool.install(|| {
        windows
            .par_iter()
            .enumerate()
            .map(|(i, window)| {
                let mut rng = derive(cfg.seed, Stream::MaskPlan, &[EVAL_TAG, i as u64]);
                let plan = build_plan(&cfg.mask, cfg.model.frames, cfg.model.joints, &mut rng)?;
                let mut pass = ModelPass::new(store, &cfg.model, None);
                let input = pass.input(&window.inputs);
                let recon = pass.pretrain_forward(input, &plan)?;
                Ok(metrics::pretrain_loss(pass.value(recon).data(), &window.inputs)?.total)
            })
            .collect()
    });
    let losses = losses?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Stage I: masked pose modeling. Trains encoder+decoder, checkpoints at the
/// eval cadence, tracks the best checkpoint by held-out reconstruction MSE.
/// With `resume`, training picks up after the checkpoint's saved epoch.
pub fn run_stage1(
    cfg: &RunConfig,
    ds: &Dataset,
    resume: Option<&Path>,
    out_dir: &Path,
) -> Result<Stage1Summary> {
    cfg.validate()?;
    prepare_run_dir(out_dir, cfg)?;
    let pool = thread_pool(cfg.workers)?;
    let sets = build_window_sets(ds, cfg, false)?;
    ensure!(!sets.train.is_empty(), Validation, "empty training split");
    let mut store = ParameterStore::new_stage1(&cfg.model, cfg.seed)?;
    let mut adam = Adam::new(&store, &cfg.optim);
    let mut start_epoch = 0usize;
    if let Some(path) = resume {
        let ckpt = load_checkpoint(path)?;
        ensure!(
            ckpt.meta.stage == Stage::Pretrain,
            Validation,
            "{} is not a stage-I checkpoint",
            path.display()
        );
        ensure!(
            ckpt.meta.config == cfg.model,
            Validation,
            "{}: checkpoint model configuration differs from the run configuration",
            path.display()
        );
        store = ckpt.store.clone();
        restore_optimizer(&mut adam, &ckpt);
        start_epoch = ckpt.meta.epoch + 1;
    }
    let mut log = MetricsLog::create(out_dir)?;
    let mut best: Option<(f64, PathBuf)> = None;
    let mut val_losses = Vec::new();
    let mut final_train_loss = f64::NAN;
    let epochs = cfg.optim.epochs_stage1;
    let mut last = PathBuf::new();

    let meta = |epoch: usize, steps: u64| CheckpointMeta {
        config: cfg.model.clone(),
        stage: Stage::Pretrain,
        epoch,
        mask: Some(cfg.mask),
        seed: cfg.seed,
        stride: cfg.stride,
        optimizer_steps: steps,
    };

    if epochs <= start_epoch {
        // Zero epochs to run: emit the (initialized or resumed) model and
        // its validation error, nothing else.
        last = out_dir
            .join("checkpoints")
            .join(format!("epoch{start_epoch}.ckpt"));
        save_checkpoint(&last, &store, Some(&adam), &meta(start_epoch, adam.steps()))?;
        fs::copy(&last, out_dir.join("best.ckpt"))?;
        fs::copy(sidecar(&last), out_dir.join("best.ckpt.json"))?;
        if !sets.val.is_empty() {
            let mse = masked_reconstruction_error(&store, cfg, &sets.val, &pool)?;
            log.row(start_epoch, "val", None, Some(mse))?;
            val_losses.push((start_epoch, mse));
        }
        return Ok(Stage1Summary {
            best: out_dir.join("best.ckpt"),
            last,
            final_train_loss,
            val_losses,
        });
    }

    for epoch in start_epoch..epochs {
        let lr = lr_schedule(epoch, cfg.optim.lr0_stage1, cfg.optim.lr_decay);
        let order = shuffled_ids(sets.train.len(), cfg.seed, 1, epoch);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for (step, chunk) in order.chunks(cfg.optim.batch_size).enumerate() {
            let windows: Vec<&WindowSample> = chunk.iter().map(|&i| &sets.train[i]).collect();
            let loss = pretrain_step(
                &mut store, &mut adam, cfg, &pool, &windows, epoch, step, chunk, lr,
            )?;
            epoch_loss += loss.total;
            batches += 1;
        }
        epoch_loss /= batches as f64;
        final_train_loss = epoch_loss;
        log.row(epoch, "train", None, Some(epoch_loss))?;

        let mut record = json!({"event": "epoch", "stage": 1, "epoch": epoch, "lr": lr, "train_loss": epoch_loss});
        if (epoch + 1) % cfg.eval_every == 0 || epoch + 1 == epochs {
            let path = out_dir
                .join("checkpoints")
                .join(format!("epoch{epoch}.ckpt"));
            save_checkpoint(&path, &store, Some(&adam), &meta(epoch, adam.steps()))?;
            last = path.clone();
            if !sets.val.is_empty() {
                let mse = masked_reconstruction_error(&store, cfg, &sets.val, &pool)?;
                log.row(epoch, "val", None, Some(mse))?;
                val_losses.push((epoch, mse));
                record["val_loss"] = json!(mse);
                if best.as_ref().is_none_or(|(b, _)| mse < *b) {
                    best = Some((mse, path.clone()));
                }
            }
        }
        progress(record);
    }
    let best_src = best.map(|(_, p)| p).unwrap_or_else(|| last.clone());
    fs::copy(&best_src, out_dir.join("best.ckpt"))?;
    fs::copy(sidecar(&best_src), out_dir.join("best.ckpt.json"))?;
    Ok(Stage1Summary {
        best: out_dir.join("best.ckpt"),
        last,
        final_train_loss,
        val_losses,
    })
}

fn sidecar(path: &Path) -> PathBuf {
    let mut os = path.as_os_str().to_os_string();
    os.push(".json");
    PathBuf::from(os)
}

/// Result of a stage-II run.
pub struct Stage2Summary {
    pub best: PathBuf,
    pub last: PathBuf,
    pub report: MetricReport,
    pub val_mpjpe: Vec<(usize, f64)>,
    pub final_train_loss: f64,
}

/// Stage II: fine-tuning, optionally from a stage-I checkpoint. Evaluates at
/// the configured cadence, keeps the best checkpoint by pooled validation
/// MPJPE, and writes the final metric report.
pub fn run_stage2(
    cfg: &RunConfig,
    ds: &Dataset,
    init: Stage2Init,
    out_dir: &Path,
) -> Result<Stage2Summary> {
    cfg.validate()?;
    prepare_run_dir(out_dir, cfg)?;
    let pool = thread_pool(cfg.workers)?;
    let sets = build_window_sets(ds, cfg, true)?;
    ensure!(!sets.train.is_empty(), Validation, "empty training split");

    let mut store = ParameterStore::new_stage2(&cfg.model, cfg.seed)?;
    let mut adam = Adam::new(&store, &cfg.optim);
    let mut start_epoch = 0usize;
    match init {
        Stage2Init::Scratch => {}
        Stage2Init::Pretrained(path) => {
            let ckpt: Checkpoint = load_checkpoint(path)?;
            ensure!(
                ckpt.meta.stage == Stage::Pretrain,
                Validation,
                "{} is not a stage-I checkpoint",
                path.display()
            );
            transfer_encoder(&ckpt.store, &mut store)?;
        }
        Stage2Init::Resume(path) => {
            let ckpt = load_checkpoint(path)?;
            ensure!(
                ckpt.meta.stage == Stage::Finetune,
                Validation,
                "{} is not a stage-II checkpoint",
                path.display()
            );
            ensure!(
                ckpt.meta.config == cfg.model,
                Validation,
                "{}: checkpoint model configuration differs from the run configuration",
                path.display()
            );
            store = ckpt.store.clone();
            restore_optimizer(&mut adam, &ckpt);
            start_epoch = ckpt.meta.epoch + 1;
        }
    }
    let mut log = MetricsLog::create(out_dir)?;
    let mut best: Option<(f64, PathBuf)> = None;
    let mut val_mpjpe = Vec::new();
    let mut final_train_loss = f64::NAN;
    let epochs = cfg.optim.epochs_stage2;

    let meta = |epoch: usize, steps: u64| CheckpointMeta {
        config: cfg.model.clone(),
        stage: Stage::Finetune,
        epoch,
        mask: None,
        seed: cfg.seed,
        stride: cfg.stride,
        optimizer_steps: steps,
    };

    let eval_now = |store: &ParameterStore, pool: &rayon::ThreadPool| -> Result<MetricReport> {
        evaluate(
            store,
            &cfg.model,
            &sets.skeleton,
            &sets.val,
            cfg.eval_flip,
            pool,
        )
    };

    if epochs <= start_epoch {
        let last = out_dir
            .join("checkpoints")
            .join(format!("epoch{start_epoch}.ckpt"));
        save_checkpoint(&last, &store, Some(&adam), &meta(start_epoch, adam.steps()))?;
        fs::copy(&last, out_dir.join("best.ckpt"))?;
        fs::copy(sidecar(&last), out_dir.join("best.ckpt.json"))?;
        let report = if sets.val.is_empty() {
            MetricReport::default()
        } else {
            eval_now(&store, &pool)?
        };
        log.row(start_epoch, "val", Some(&report.pooled), None)?;
        fs::write(out_dir.join("report.json"), report.to_json())?;
        let mut csv = Vec::new();
        report.write_csv(&mut csv)?;
        fs::write(out_dir.join("per_action.csv"), csv)?;
        return Ok(Stage2Summary {
            best: out_dir.join("best.ckpt"),
            last,
            report,
            val_mpjpe,
            final_train_loss,
        });
    }

    let mut last = PathBuf::new();
    for epoch in start_epoch..epochs {
        let lr = lr_schedule(epoch, cfg.optim.lr0_stage2, cfg.optim.lr_decay);
        let order = shuffled_ids(sets.train.len(), cfg.seed, 2, epoch);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for (step, chunk) in order.chunks(cfg.optim.batch_size).enumerate() {
            let windows: Vec<&WindowSample> = chunk.iter().map(|&i| &sets.train[i]).collect();
            let loss = finetune_step(
                &mut store,
                &mut adam,
                cfg,
                &pool,
                &sets.skeleton,
                &windows,
                epoch,
                step,
                chunk,
                lr,
            )?;
            epoch_loss += loss.total;
            batches += 1;
        }
        epoch_loss /= batches as f64;
        final_train_loss = epoch_loss;
        log.row(epoch, "train", None, Some(epoch_loss))?;

        let mut record = json!({"event": "epoch", "stage": 2, "epoch": epoch, "lr": lr, "train_loss": epoch_loss});
        if (epoch + 1) % cfg.eval_every == 0 || epoch + 1 == epochs {
            let path = out_dir
                .join("checkpoints")
                .join(format!("epoch{epoch}.ckpt"));
            save_checkpoint(&path, &store, Some(&adam), &meta(epoch, adam.steps()))?;
            last = path.clone();
            if !sets.val.is_empty() {
                let report = eval_now(&store, &pool)?;
                log.row(epoch, "val", Some(&report.pooled), None)?;
                val_mpjpe.push((epoch, report.pooled.mpjpe));
                record["val_mpjpe"] = json!(report.pooled.mpjpe);
                if best.as_ref().is_none_or(|(b, _)| report.pooled.mpjpe < *b) {
                    best = Some((report.pooled.mpjpe, path.clone()));
                }
            }
        }
        progress(record);
    }
    let best_src = best.map(|(_, p)| p).unwrap_or_else(|| last.clone());
    fs::copy(&best_src, out_dir.join("best.ckpt"))?;
    fs::copy(sidecar(&best_src), out_dir.join("best.ckpt.json"))?;

    let best_ckpt = load_checkpoint(&out_dir.join("best.ckpt"))?;
    let report = if sets.val.is_empty() {
        MetricReport::default()
    } else {
        eval_now(&best_ckpt.store, &pool)?
    };
    fs::write(out_dir.join("report.json"), report.to_json())?;
    let mut csv = Vec::new();
    report.write_csv(&mut csv)?;
    fs::write(out_dir.join("per_action.csv"), csv)?;
    Ok(Stage2Summary {
        best: out_dir.join("best.ckpt"),
        last,
        report,
        val_mpjpe,
        final_train_loss,
    })
}
