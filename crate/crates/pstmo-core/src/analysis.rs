//! Complexity accounting and attention-map export.
//!
//! Parameter counts are computed from shapes alone and agree exactly with an
//! instantiated [`ParameterStore`] (see tests). FLOPs follow a declared
//! convention: 2 operations per multiply-add in every linear map, attention
//! score/mix product and convolution; softmax, normalization, activations,
//! bias and residual adds count one operation per element. FLOPs are
//! reported per full window pass, i.e. per predicted output frame.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::masking::MaskPlan;
use crate::model::{AttentionDump, ModelConfig, ModelPass, ParameterStore, Stage};

// ----- parameter counting ---------------------------------------------------

fn linear_params(input: usize, output: usize) -> u64 {
    (input * output + output) as u64
}

fn layer_norm_params(d: usize) -> u64 {
    2 * d as u64
}

fn attention_params(d: usize) -> u64 {
    4 * linear_params(d, d)
}

fn transformer_layer_params(cfg: &ModelConfig) -> u64 {
    let d = cfg.latent_dim;
    2 * layer_norm_params(d)
        + attention_params(d)
        + linear_params(d, cfg.ffn_width())
        + linear_params(cfg.ffn_width(), d)
}

fn sem_params(cfg: &ModelConfig) -> u64 {
    let d = cfg.latent_dim;
    linear_params(cfg.input_width(), d)
        + cfg.sem_blocks as u64
            * (layer_norm_params(d)
                + linear_params(d, cfg.ffn_width())
                + linear_params(cfg.ffn_width(), d))
}

fn tem_params(cfg: &ModelConfig) -> u64 {
    // Positional table plus the transformer stack and its final norm.
    (cfg.frames * cfg.latent_dim) as u64
        + cfg.tem_layers as u64 * transformer_layer_params(cfg)
        + layer_norm_params(cfg.latent_dim)
}

fn mofa_layer_params(cfg: &ModelConfig) -> u64 {
    let d = cfg.latent_dim;
    2 * layer_norm_params(d)
        + attention_params(d)
        + linear_params(cfg.conv_kernel * d, cfg.ffn_width())
        + linear_params(cfg.ffn_width(), d)
}

fn mofa_params(cfg: &ModelConfig) -> u64 {
    cfg.mofa_layers as u64 * mofa_layer_params(cfg) + layer_norm_params(cfg.latent_dim)
}

fn decoder_params(cfg: &ModelConfig) -> u64 {
    let d = cfg.latent_dim;
    // Padding tokens, decoder positional table, decoder stack, 2D head.
    2 + d as u64
        + (cfg.frames * d) as u64
        + cfg.decoder_layers as u64 * transformer_layer_params(cfg)
        + layer_norm_params(d)
        + linear_params(d, cfg.input_width())
}

fn head_params(cfg: &ModelConfig) -> u64 {
    2 * linear_params(cfg.latent_dim, 3 * cfg.joints)
}

/// Per-module breakdown; fields not present in a stage are zero.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModuleBreakdown {
    pub sem: u64,
    pub tem: u64,
    pub mofa: u64,
    pub heads: u64,
    pub decoder: u64,
}

impl ModuleBreakdown {
    pub fn total(&self) -> u64 {
        self.sem + self.tem + self.mofa + self.heads + self.decoder
    }
}

/// Exact learnable-scalar count for one stage, from shapes alone.
pub fn count_params(cfg: &ModelConfig, stage: Stage) -> u64 {
    params_breakdown(cfg, stage).total()
}

pub fn params_breakdown(cfg: &ModelConfig, stage: Stage) -> ModuleBreakdown {
    match stage {
        Stage::Pretrain => ModuleBreakdown {
            sem: sem_params(cfg),
            tem: tem_params(cfg),
            decoder: decoder_params(cfg),
            ..Default::default()
        },
        Stage::Finetune => ModuleBreakdown {
            sem: sem_params(cfg),
            tem: tem_params(cfg),
            mofa: mofa_params(cfg),
            heads: head_params(cfg),
            decoder: 0,
        },
    }
}

// ----- FLOP counting --------------------------------------------------------

fn linear_flops(rows: usize, input: usize, output: usize) -> u64 {
    (2 * rows * input * output + rows * output) as u64
}

fn mhsa_flops(rows: usize, cfg: &ModelConfig) -> u64 {
    let d = cfg.latent_dim;
    let t2 = (rows * rows) as u64;
    // Four projections, score and mix products, scale and softmax.
    4 * linear_flops(rows, d, d) + 4 * t2 * d as u64 + 2 * cfg.heads as u64 * t2
}

fn feed_forward_flops(rows: usize, input: usize, cfg: &ModelConfig) -> u64 {
    let f = cfg.ffn_width();
    linear_flops(rows, input, f) + (rows * f) as u64 + linear_flops(rows, f, cfg.latent_dim)
}

fn transformer_layer_flops(rows: usize, cfg: &ModelConfig) -> u64 {
    let d = cfg.latent_dim as u64;
    let elems = rows as u64 * d;
    2 * elems // two layer norms
        + mhsa_flops(rows, cfg)
        + feed_forward_flops(rows, cfg.latent_dim, cfg)
        + 2 * elems // two residual adds
}

fn sem_flops(rows: usize, cfg: &ModelConfig) -> u64 {
    let d = cfg.latent_dim as u64;
    let elems = rows as u64 * d;
    linear_flops(rows, cfg.input_width(), cfg.latent_dim)
        + cfg.sem_blocks as u64 * (elems + feed_forward_flops(rows, cfg.latent_dim, cfg) + elems)
}

fn tem_flops(rows: usize, cfg: &ModelConfig) -> u64 {
    let elems = (rows * cfg.latent_dim) as u64;
    elems // positional add
        + cfg.tem_layers as u64 * transformer_layer_flops(rows, cfg)
        + elems // final norm
}

fn mofa_flops(cfg: &ModelConfig) -> u64 {
    let d = cfg.latent_dim;
    let m = cfg.conv_kernel;
    let mut total = 0u64;
    let mut rows = cfg.frames;
    for _ in 0..cfg.mofa_layers {
        let elems = (rows * d) as u64;
        total += elems; // norm1
        total += mhsa_flops(rows, cfg);
        total += elems; // residual add
        total += elems; // norm2
        let out_rows = rows / m;
        total += linear_flops(out_rows, m * d, cfg.ffn_width());
        total += (out_rows * cfg.ffn_width()) as u64; // activation
        total += linear_flops(out_rows, cfg.ffn_width(), d);
        rows = out_rows;
    }
    total + (rows * d) as u64 // final norm
}

/// Cost of the shared encoder over `rows` frames; lets the masked and
/// unmasked regimes be compared directly.
pub fn encoder_flops(cfg: &ModelConfig, rows: usize) -> u64 {
    sem_flops(rows, cfg) + tem_flops(rows, cfg)
}

pub fn flops_breakdown(cfg: &ModelConfig, stage: Stage) -> ModuleBreakdown {
    let n = cfg.frames;
    match stage {
        Stage::Finetune => ModuleBreakdown {
            sem: sem_flops(n, cfg),
            tem: tem_flops(n, cfg),
            mofa: mofa_flops(cfg),
            heads: linear_flops(n, cfg.latent_dim, 3 * cfg.joints)
                + linear_flops(1, cfg.latent_dim, 3 * cfg.joints),
            decoder: 0,
        },
        Stage::Pretrain => {
            // Encoder sees only the unmasked frames; report the worst case
            // (nothing masked) so the number does not depend on a plan.
            ModuleBreakdown {
                sem: sem_flops(n, cfg),
                tem: tem_flops(n, cfg),
                mofa: 0,
                heads: 0,
                decoder: (n * cfg.latent_dim) as u64 // positional add
                    + cfg.decoder_layers as u64 * transformer_layer_flops(n, cfg)
                    + (n * cfg.latent_dim) as u64 // final norm
                    + linear_flops(n, cfg.latent_dim, cfg.input_width()),
            }
        }
    }
}

/// FLOPs per predicted output frame (one full window pass).
pub fn count_flops(cfg: &ModelConfig, stage: Stage) -> u64 {
    flops_breakdown(cfg, stage).total()
}

/// Parameter and FLOP accounting for one configuration and stage.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ComplexityReport {
    pub stage: String,
    pub params: u64,
    pub flops_per_output_frame: u64,
    pub params_breakdown: ModuleBreakdown,
    pub flops_breakdown: ModuleBreakdown,
}

impl ComplexityReport {
    pub fn for_config(cfg: &ModelConfig, stage: Stage) -> Result<Self> {
        cfg.validate()?;
        Ok(ComplexityReport {
            stage: match stage {
                Stage::Pretrain => "pretrain".into(),
                Stage::Finetune => "finetune".into(),
            },
            params: count_params(cfg, stage),
            flops_per_output_frame: count_flops(cfg, stage),
            params_breakdown: params_breakdown(cfg, stage),
            flops_breakdown: flops_breakdown(cfg, stage),
        })
    }
}

// ----- ablation baselines ---------------------------------------------------

/// The component-study baselines: a per-frame MLP regressor, a plain
/// transformer lifter, and the encoder without the aggregator.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Ablation {
    /// Per-frame MLP (four sub-blocks) straight to a 3D head.
    SemOnly,
    /// Frame embedding, positional table, TEM stack, 3D head.
    TemOnly,
    /// SEM + TEM with both regression heads, no aggregator.
    SemTem,
}

/// Parameter count of an ablation baseline derived from `cfg`'s widths.
pub fn ablation_params(which: Ablation, cfg: &ModelConfig) -> u64 {
    let d = cfg.latent_dim;
    let head = linear_params(d, 3 * cfg.joints);
    match which {
        Ablation::SemOnly => {
            let block = layer_norm_params(d)
                + linear_params(d, cfg.ffn_width())
                + linear_params(cfg.ffn_width(), d);
            linear_params(cfg.input_width(), d) + 4 * block + head
        }
        Ablation::TemOnly => linear_params(cfg.input_width(), d) + tem_params(cfg) + head,
        Ablation::SemTem => sem_params(cfg) + tem_params(cfg) + 2 * head,
    }
}

// ----- receptive field --------------------------------------------------------

/// Temporal receptive field of an `N`-frame window with stride `s`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReceptiveField {
    /// `N·s`, the tabulated convention.
    pub rf: usize,
    /// `N·s − s + 1`, the exact number of source frames spanned.
    pub span: usize,
}

pub fn receptive_field(n: usize, s: usize) -> Result<ReceptiveField> {
    ensure!(
        n >= 1 && s >= 1,
        Validation,
        "window length and stride must be positive"
    );
    Ok(ReceptiveField {
        rf: n * s,
        span: n * s - s + 1,
    })
}

// ----- attention export -------------------------------------------------------

/// Runs one recorded forward pass and returns every attention matrix.
/// Stage-I stores run the masked encoder/decoder pipeline with `plan`;
/// stage-II stores run the full lifting pass (plan must be empty).
pub fn export_attention(
    store: &ParameterStore,
    cfg: &ModelConfig,
    window: &[f64],
    plan: &MaskPlan,
) -> Result<Vec<AttentionDump>> {
    let mut pass = ModelPass::new(store, cfg, None);
    pass.record_attention();
    let input = pass.input(window);
    match store.stage() {
        Stage::Pretrain => {
            pass.pretrain_forward(input, plan)?;
        }
        Stage::Finetune => {
            pass.stmo_forward(input)?;
        }
    }
    let dumps = pass.take_dumps();
    ensure!(
        !dumps.is_empty(),
        Validation,
        "attention recording produced no maps"
    );
    Ok(dumps)
}

fn dump_stem(dump: &AttentionDump) -> String {
    let stage = match dump.stage {
        Stage::Pretrain => "stage1",
        Stage::Finetune => "stage2",
    };
    format!("{stage}_{}_L{}_H{}", dump.module, dump.layer, dump.head)
}

#[derive(Serialize)]
struct DumpMeta {
    file: String,
    stage: String,
    module: String,
    layer: usize,
    head: usize,
    rows: usize,
    cols: usize,
    /// (unmasked, masked) block boundary for decoder maps.
    partition: Option<(usize, usize)>,
}

/// Writes one CSV and one SVG heatmap per dump, plus a `meta.json` index
/// carrying the decoder block boundaries.
pub fn write_attention_dumps(dir: &Path, dumps: &[AttentionDump]) -> Result<()> {
    ensure!(!dumps.is_empty(), Validation, "no attention maps to write");
    fs::create_dir_all(dir)?;
    let mut meta = Vec::with_capacity(dumps.len());
    for dump in dumps {
        let stem = dump_stem(dump);
        let (rows, cols) = (dump.matrix.rows(), dump.matrix.cols());
        let mut csv = String::new();
        for r in 0..rows {
            let line: Vec<String> = dump
                .matrix
                .row(r)
                .iter()
                .map(|v| format!("{v:.5e}"))
                .collect();
            csv.push_str(&line.join(","));
            csv.push('\n');
        }
        fs::write(dir.join(format!("{stem}.csv")), csv)?;
        fs::write(dir.join(format!("{stem}.svg")), render_heatmap(dump))?;
        meta.push(DumpMeta {
            file: stem,
            stage: match dump.stage {
                Stage::Pretrain => "stage1".into(),
                Stage::Finetune => "stage2".into(),
            },
            module: dump.module.clone(),
            layer: dump.layer,
            head: dump.head,
            rows,
            cols,
            partition: dump.partition,
        });
    }
    fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

/// Minimal grayscale heatmap; darker cells carry more weight. Decoder maps
/// get red partition rules at the unmasked/masked boundary.
fn render_heatmap(dump: &AttentionDump) -> String {
    let (rows, cols) = (dump.matrix.rows(), dump.matrix.cols());
    let cell = (600 / rows.max(cols)).clamp(1, 12);
    let (w, h) = (cols * cell, rows * cell);
    let max = dump
        .matrix
        .data()
        .iter()
        .cloned()
        .fold(f64::MIN, f64::max)
        .max(1e-12);
    let mut svg = String::with_capacity(rows * cols * 48);
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n"
    ));
    svg.push_str(&format!(
        "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n"
    ));
    for r in 0..rows {
        for c in 0..cols {
            let v = dump.matrix.row(r)[c] / max;
            let shade = (255.0 * (1.0 - v)).round() as u8;
            if shade == 255 {
                continue;
            }
            svg.push_str(&format!(
                "<rect x=\"{}\" y=\"{}\" width=\"{cell}\" height=\"{cell}\" fill=\"rgb({shade},{shade},{shade})\"/>\n",
                c * cell,
                r * cell
            ));
        }
    }
    if let Some((a, _)) = dump.partition {
        let x = a * cell;
        svg.push_str(&format!(
            "<line x1=\"{x}\" y1=\"0\" x2=\"{x}\" y2=\"{h}\" stroke=\"red\" stroke-width=\"1\"/>\n"
        ));
        svg.push_str(&format!(
            "<line x1=\"0\" y1=\"{x}\" x2=\"{w}\" y2=\"{x}\" stroke=\"red\" stroke-width=\"1\"/>\n"
        ));
    }
    svg.push_str("</svg>\n");
    svg
}
