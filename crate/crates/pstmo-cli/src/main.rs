//! `pstmo`: train, evaluate and inspect the two-stage 2D-to-3D pose lifter.
//!
//! Subcommands: `synth` (generate a synthetic dataset), `pretrain` /
//! `finetune` (the two optimization stages), `eval` (metrics with optional
//! flip averaging and input corruption), `count` (parameter/FLOP report),
//! `rf` (temporal receptive field) and `attn` (attention-map export).
//!
//! Exit codes: 0 success, 2 usage error, 3 validation error, 4 runtime
//! failure. Failures emit a single-line JSON error record on stderr.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use pstmo_core::analysis::{
    export_attention, receptive_field, write_attention_dumps, ComplexityReport,
};
use pstmo_core::augment::{add_gaussian_noise, shuffle_frames};
use pstmo_core::checkpoint::load_checkpoint;
use pstmo_core::dataset::{load_dataset, save_dataset, Dataset, Normalization};
use pstmo_core::error::Error;
use pstmo_core::masking::MaskPlan;
use pstmo_core::model::{mofa_depth_for, Stage};
use pstmo_core::pose::{extract_window, SequenceLabels, WindowSample};
use pstmo_core::rng::{derive, Stream};
use pstmo_core::synth::synth_generate;
use pstmo_core::train::{evaluate, run_stage1, run_stage2, RunConfig, Stage2Init};
use pstmo_core::Skeleton;

#[derive(Parser)]
#[command(
    name = "pstmo",
    version,
    about = "Two-stage 2D-to-3D pose lifting: masked pose-modeling pre-training, spatial-temporal many-to-one fine-tuning"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic skeleton-motion dataset
    Synth(SynthArgs),
    /// Stage I: masked pose-modeling pre-training
    Pretrain(TrainArgs),
    /// Stage II: fine-tune the lifting model
    Finetune(FinetuneArgs),
    /// Evaluate a stage-II checkpoint on a dataset
    Eval(EvalArgs),
    /// Parameter and FLOP accounting for a configuration
    Count(CountArgs),
    /// Temporal receptive field of a window configuration
    Rf(RfArgs),
    /// Export attention maps for one window of a dataset
    Attn(AttnArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Output dataset directory
    #[arg(long)]
    out: PathBuf,
    /// Frames per sequence
    #[arg(long, default_value_t = 600)]
    frames: usize,
    /// Number of sequences
    #[arg(long, default_value_t = 1)]
    sequences: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    /// Run configuration file (JSON)
    #[arg(long)]
    config: PathBuf,
    /// Run directory to create
    #[arg(long)]
    out: PathBuf,
    /// Dataset directory (overrides the config's data_dir)
    #[arg(long)]
    data: Option<PathBuf>,
    /// Training epochs for this stage
    #[arg(long)]
    epochs: Option<usize>,
    /// Batch size
    #[arg(long)]
    batch: Option<usize>,
    /// Window length N
    #[arg(long = "n-frames")]
    n_frames: Option<usize>,
    /// Temporal downsampling stride s
    #[arg(long)]
    stride: Option<usize>,
    /// Temporal masking ratio q_T
    #[arg(long)]
    qt: Option<f64>,
    /// Masked joints per frame m_S
    #[arg(long)]
    ms: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (0 = all cores)
    #[arg(long)]
    workers: Option<usize>,
    /// Continue a previous run from one of its checkpoints
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct FinetuneArgs {
    #[command(flatten)]
    train: TrainArgs,
    /// Stage-I checkpoint whose encoder initializes this run
    #[arg(long = "from-pretrained")]
    from_pretrained: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Stage-II checkpoint
    #[arg(long)]
    ckpt: PathBuf,
    /// Dataset directory
    #[arg(long)]
    data: PathBuf,
    /// Average predictions over the input and its horizontal flip
    #[arg(long)]
    flip: bool,
    /// Gaussian noise std-dev added to the 2D inputs
    #[arg(long = "noise-sigma")]
    noise_sigma: Option<f64>,
    /// Randomly permute the input frames of every window
    #[arg(long)]
    shuffle: bool,
    /// Output directory for metrics.csv and report.json
    #[arg(long, default_value = ".")]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    workers: usize,
}

#[derive(Args)]
struct CountArgs {
    /// Run configuration file (JSON)
    #[arg(long)]
    config: PathBuf,
}

#[derive(Args)]
struct RfArgs {
    /// Window length N
    #[arg(long)]
    n: usize,
    /// Temporal downsampling stride s
    #[arg(long)]
    s: usize,
}

#[derive(Args)]
struct AttnArgs {
    /// Checkpoint (either stage)
    #[arg(long)]
    ckpt: PathBuf,
    /// Dataset directory
    #[arg(long)]
    data: PathBuf,
    /// Index into the dataset's window list
    #[arg(long = "window-index", default_value_t = 0)]
    window_index: usize,
    /// Output directory for the CSV/SVG tree
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (kind, code) = match &e {
                Error::Validation(_) | Error::Shape(_) | Error::Format(_) => ("validation", 3u8),
                Error::Io(_) | Error::Numeric(_) => ("runtime", 4u8),
            };
            eprintln!(
                "{}",
                json!({"error": {"kind": kind, "message": e.to_string()}})
            );
            ExitCode::from(code)
        }
    }
}

fn run(command: Command) -> Result<(), Error> {
    match command {
        Command::Synth(args) => cmd_synth(args),
        Command::Pretrain(args) => cmd_pretrain(args),
        Command::Finetune(args) => cmd_finetune(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Count(args) => cmd_count(args),
        Command::Rf(args) => cmd_rf(args),
        Command::Attn(args) => cmd_attn(args),
    }
}

const SYNTH_ACTIONS: [&str; 4] = ["walk", "sit", "wave", "turn"];

fn cmd_synth(args: SynthArgs) -> Result<(), Error> {
    let skeleton = Skeleton::h36m_17();
    let sequences = (0..args.sequences)
        .map(|i| {
            let labels = SequenceLabels {
                subject: format!("s{:02}", i),
                action: SYNTH_ACTIONS[i % SYNTH_ACTIONS.len()].to_string(),
                camera: "c0".to_string(),
            };
            synth_generate(
                &skeleton,
                args.frames,
                args.seed.wrapping_add(i as u64),
                labels,
            )
        })
        .collect::<Result<Vec<_>, _>>()?;
    let dataset = Dataset {
        skeleton,
        normalization: Normalization {
            width: 1000,
            height: 1000,
        },
        sequences,
    };
    save_dataset(&args.out, &dataset)?;
    println!(
        "{}",
        json!({"event": "synth", "sequences": args.sequences, "frames": args.frames, "seed": args.seed, "out": args.out})
    );
    Ok(())
}

/// Loads the run configuration and applies command-line overrides.
fn load_run_config(args: &TrainArgs, stage: Stage) -> Result<(RunConfig, PathBuf), Error> {
    let text = fs::read_to_string(&args.config).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", args.config.display()),
        ))
    })?;
    let mut cfg: RunConfig = serde_json::from_str(&text)?;
    if let Some(e) = args.epochs {
        match stage {
            Stage::Pretrain => cfg.optim.epochs_stage1 = e,
            Stage::Finetune => cfg.optim.epochs_stage2 = e,
        }
    }
    if let Some(b) = args.batch {
        cfg.optim.batch_size = b;
    }
    if let Some(n) = args.n_frames {
        cfg.model.frames = n;
        cfg.model.mofa_layers = mofa_depth_for(n, cfg.model.conv_kernel)?;
    }
    if let Some(s) = args.stride {
        cfg.stride = s;
    }
    if let Some(q) = args.qt {
        cfg.mask.q_t = q;
    }
    if let Some(m) = args.ms {
        cfg.mask.m_s = m;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(w) = args.workers {
        cfg.workers = w;
    }
    cfg.validate()?;

    // The dataset path comes from --data, else from the config file,
    // resolved relative to the config file's directory.
    let data_dir = match &args.data {
        Some(d) => d.clone(),
        None => {
            if cfg.data_dir.is_empty() {
                return Err(Error::Validation(
                    "no dataset: set data_dir in the config or pass --data".into(),
                ));
            }
            let p = PathBuf::from(&cfg.data_dir);
            if p.is_relative() {
                args.config
                    .parent()
                    .unwrap_or_else(|| Path::new("."))
                    .join(p)
            } else {
                p
            }
        }
    };
    cfg.data_dir = data_dir.display().to_string();
    Ok((cfg, data_dir))
}

fn cmd_pretrain(args: TrainArgs) -> Result<(), Error> {
    let (cfg, data_dir) = load_run_config(&args, Stage::Pretrain)?;
    let dataset = load_dataset(&data_dir)?;
    let summary = run_stage1(&cfg, &dataset, args.resume.as_deref(), &args.out)?;
    println!(
        "{}",
        json!({"event": "done", "stage": 1, "best": summary.best, "final_train_loss": summary.final_train_loss})
    );
    Ok(())
}

fn cmd_finetune(args: FinetuneArgs) -> Result<(), Error> {
    let (cfg, data_dir) = load_run_config(&args.train, Stage::Finetune)?;
    let dataset = load_dataset(&data_dir)?;
    let init = match (&args.train.resume, &args.from_pretrained) {
        (Some(_), Some(_)) => {
            return Err(Error::Validation(
                "--resume and --from-pretrained are mutually exclusive".into(),
            ))
        }
        (Some(r), None) => Stage2Init::Resume(r),
        (None, Some(p)) => Stage2Init::Pretrained(p),
        (None, None) => Stage2Init::Scratch,
    };
    let summary = run_stage2(&cfg, &dataset, init, &args.train.out)?;
    println!(
        "{}",
        json!({
            "event": "done",
            "stage": 2,
            "best": summary.best,
            "val_mpjpe": summary.report.pooled.mpjpe,
            "val_p_mpjpe": summary.report.pooled.p_mpjpe,
        })
    );
    Ok(())
}

/// All windows of every sequence, in dataset order, cut with the
/// checkpoint's own window length and stride.
fn all_windows(ds: &Dataset, frames: usize, stride: usize) -> Result<Vec<WindowSample>, Error> {
    let mut windows = Vec::new();
    for seq in &ds.sequences {
        for center in 0..seq.num_frames() {
            windows.push(extract_window(seq, center, frames, stride)?);
        }
    }
    Ok(windows)
}

fn cmd_eval(args: EvalArgs) -> Result<(), Error> {
    let ckpt = load_checkpoint(&args.ckpt)?;
    if ckpt.meta.stage != Stage::Finetune {
        return Err(Error::Validation(format!(
            "{} is a stage-I checkpoint; evaluation needs a fine-tuned model",
            args.ckpt.display()
        )));
    }
    let mut dataset = load_dataset(&args.data)?;
    if dataset.skeleton.num_joints() != ckpt.meta.config.joints {
        return Err(Error::Shape(format!(
            "dataset has {} joints, checkpoint expects {}",
            dataset.skeleton.num_joints(),
            ckpt.meta.config.joints
        )));
    }
    for seq in &dataset.sequences {
        if !seq.has_targets() {
            return Err(Error::Validation(
                "evaluation dataset lacks 3D targets".into(),
            ));
        }
    }
    // Input corruption: noise on the sequences, shuffling on the windows.
    if let Some(sigma) = args.noise_sigma {
        for (i, seq) in dataset.sequences.iter_mut().enumerate() {
            let mut rng = derive(ckpt.meta.seed, Stream::Augment, &[0xE7A1, i as u64]);
            *seq = add_gaussian_noise(seq, sigma, &mut rng)?;
        }
    }
    let mut windows = all_windows(&dataset, ckpt.meta.config.frames, ckpt.meta.stride)?;
    if args.shuffle {
        for (i, w) in windows.iter_mut().enumerate() {
            let mut rng = derive(ckpt.meta.seed, Stream::Augment, &[0x54FF, i as u64]);
            *w = shuffle_frames(w, &mut rng);
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(args.workers)
        .build()
        .map_err(|e| Error::Validation(format!("thread pool: {e}")))?;
    let report = evaluate(
        &ckpt.store,
        &ckpt.meta.config,
        &dataset.skeleton,
        &windows,
        args.flip,
        &pool,
    )?;
    fs::create_dir_all(&args.out)?;
    let mut csv = Vec::new();
    report.write_csv(&mut csv)?;
    fs::write(args.out.join("metrics.csv"), csv)?;
    fs::write(args.out.join("report.json"), report.to_json())?;
    println!(
        "{}",
        json!({
            "event": "eval",
            "windows": windows.len(),
            "mpjpe": report.pooled.mpjpe,
            "p_mpjpe": report.pooled.p_mpjpe,
            "pck150": report.pooled.pck150,
            "auc": report.pooled.auc,
            "flip": args.flip,
            "noise_sigma": args.noise_sigma,
            "shuffle": args.shuffle,
        })
    );
    Ok(())
}

fn cmd_count(args: CountArgs) -> Result<(), Error> {
    let text = fs::read_to_string(&args.config).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", args.config.display()),
        ))
    })?;
    let cfg: RunConfig = serde_json::from_str(&text)?;
    cfg.model.validate()?;
    let report = json!({
        "pretrain": ComplexityReport::for_config(&cfg.model, Stage::Pretrain)?,
        "finetune": ComplexityReport::for_config(&cfg.model, Stage::Finetune)?,
    });
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn cmd_rf(args: RfArgs) -> Result<(), Error> {
    let rf = receptive_field(args.n, args.s)?;
    println!("{}", json!({"rf": rf.rf, "span": rf.span}));
    Ok(())
}

fn cmd_attn(args: AttnArgs) -> Result<(), Error> {
    let ckpt = load_checkpoint(&args.ckpt)?;
    let dataset = load_dataset(&args.data)?;
    if dataset.skeleton.num_joints() != ckpt.meta.config.joints {
        return Err(Error::Shape(format!(
            "dataset has {} joints, checkpoint expects {}",
            dataset.skeleton.num_joints(),
            ckpt.meta.config.joints
        )));
    }
    let windows = all_windows(&dataset, ckpt.meta.config.frames, ckpt.meta.stride)?;
    let window = windows.get(args.window_index).ok_or_else(|| {
        Error::Validation(format!(
            "window index {} out of range ({} windows)",
            args.window_index,
            windows.len()
        ))
    })?;
    let plan = match ckpt.meta.stage {
        Stage::Finetune => MaskPlan::empty(ckpt.meta.config.frames),
        Stage::Pretrain => {
            let mask = ckpt.meta.mask.ok_or_else(|| {
                Error::Format("stage-I checkpoint lacks its masking configuration".into())
            })?;
            let mut rng = derive(
                ckpt.meta.seed,
                Stream::MaskPlan,
                &[0xA77, args.window_index as u64],
            );
            pstmo_core::masking::build_plan(
                &mask,
                ckpt.meta.config.frames,
                ckpt.meta.config.joints,
                &mut rng,
            )?
        }
    };
    let dumps = export_attention(&ckpt.store, &ckpt.meta.config, &window.inputs, &plan)?;
    write_attention_dumps(&args.out, &dumps)?;
    println!(
        "{}",
        json!({"event": "attn", "maps": dumps.len(), "window_index": args.window_index, "out": args.out})
    );
    Ok(())
}
