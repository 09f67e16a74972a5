//! End-to-end tests of the `pstmo` binary: the synth → pretrain → finetune →
//! eval → attn pipeline, exit codes, and byte-reproducibility of emitted
//! files.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn pstmo(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pstmo"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn tree_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().display().to_string();
                files.push((rel, fs::read(&path).unwrap()));
            }
        }
    }
    files.sort();
    files
}

const DESK_CONFIG: &str = r#"{
  "model": {
    "frames": 9,
    "joints": 17,
    "latent_dim": 32,
    "heads": 4,
    "sem_blocks": 1,
    "tem_layers": 1,
    "decoder_layers": 1,
    "mofa_layers": 2,
    "conv_kernel": 3,
    "ffn_expansion": 2,
    "dropout": 0.1,
    "variant": "custom"
  },
  "stride": 1,
  "seed": 3,
  "eval_flip": false,
  "workers": 2,
  "optim": {
    "lr0_stage1": 0.001,
    "lr0_stage2": 0.002,
    "lr_decay": 0.97,
    "beta1": 0.9,
    "beta2": 0.999,
    "epsilon": 1e-8,
    "epochs_stage1": 1,
    "epochs_stage2": 1,
    "batch_size": 32
  },
  "data_dir": "data"
}"#;

#[test]
fn synth_is_byte_reproducible() {
    let dir = TempDir::new().unwrap();
    for name in ["a", "b"] {
        let out = pstmo(
            &[
                "synth",
                "--out",
                name,
                "--frames",
                "40",
                "--sequences",
                "2",
                "--seed",
                "9",
            ],
            dir.path(),
        );
        assert_ok(&out);
    }
    assert_eq!(
        tree_bytes(&dir.path().join("a")),
        tree_bytes(&dir.path().join("b"))
    );
    let other = pstmo(
        &[
            "synth",
            "--out",
            "c",
            "--frames",
            "40",
            "--sequences",
            "2",
            "--seed",
            "10",
        ],
        dir.path(),
    );
    assert_ok(&other);
    assert_ne!(
        tree_bytes(&dir.path().join("a")),
        tree_bytes(&dir.path().join("c"))
    );
}

#[test]
fn rf_prints_table_values_and_rejects_bad_input() {
    let dir = TempDir::new().unwrap();
    let out = pstmo(&["rf", "--n", "27", "--s", "9"], dir.path());
    assert_ok(&out);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("\"rf\":243"), "stdout: {stdout}");
    assert!(stdout.contains("\"span\":235"), "stdout: {stdout}");

    let bad = pstmo(&["rf", "--n", "0", "--s", "1"], dir.path());
    assert_eq!(bad.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("\"error\""));
}

#[test]
fn unknown_flag_exits_2_without_side_effects() {
    let dir = TempDir::new().unwrap();
    let out = pstmo(&["synth", "--out", "x", "--bogus"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(!dir.path().join("x").exists());
}

#[test]
fn help_enumerates_subcommands_and_flags() {
    let dir = TempDir::new().unwrap();
    let out = pstmo(&["--help"], dir.path());
    assert_ok(&out);
    let text = String::from_utf8_lossy(&out.stdout);
    for sub in [
        "synth", "pretrain", "finetune", "eval", "count", "rf", "attn",
    ] {
        assert!(text.contains(sub), "missing {sub} in --help");
    }
    let eval_help = pstmo(&["eval", "--help"], dir.path());
    let text = String::from_utf8_lossy(&eval_help.stdout);
    for flag in [
        "--ckpt",
        "--data",
        "--flip",
        "--noise-sigma",
        "--shuffle",
        "--out",
    ] {
        assert!(text.contains(flag), "missing {flag} in eval --help");
    }
}

#[test]
fn count_reports_reference_parameter_budget() {
    let dir = TempDir::new().unwrap();
    fs::write(dir.path().join("ref.json"), "{}").unwrap(); // reference defaults
    let out = pstmo(&["count", "--config", "ref.json"], dir.path());
    assert_ok(&out);
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let params = report["finetune"]["params"].as_u64().unwrap() as f64;
    assert!((params - 6.2e6).abs() <= 0.05 * 6.2e6, "params {params}");
    assert!(report["pretrain"]["params"].as_u64().unwrap() > 0);
}

#[test]
fn missing_checkpoint_is_a_runtime_failure() {
    let dir = TempDir::new().unwrap();
    fs::create_dir(dir.path().join("data")).unwrap();
    let out = pstmo(
        &["eval", "--ckpt", "nope.ckpt", "--data", "data"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&out.stderr).contains("\"error\""));
}

#[test]
fn full_pipeline_end_to_end() {
    let dir = TempDir::new().unwrap();
    let root = dir.path();
    fs::write(root.join("cfg.json"), DESK_CONFIG).unwrap();

    assert_ok(&pstmo(
        &[
            "synth",
            "--out",
            "data",
            "--frames",
            "60",
            "--sequences",
            "3",
            "--seed",
            "5",
        ],
        root,
    ));
    for name in ["manifest.json", "seq000_2d.pseq", "seq000_3d.pseq", "seq002_2d.pseq"] {
        assert!(root.join("data").join(name).exists(), "missing {name}");
    }

    // Stage I, with masking overrides; run twice to check reproducibility.
    for run in ["s1", "s1_copy"] {
        let out = pstmo(
            &[
                "pretrain", "--config", "cfg.json", "--out", run, "--qt", "0.8", "--ms", "2",
            ],
            root,
        );
        assert_ok(&out);
    }
    assert_eq!(
        tree_bytes(&root.join("s1")),
        tree_bytes(&root.join("s1_copy"))
    );
    let cfg_used: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(root.join("s1/config.json")).unwrap()).unwrap();
    assert_eq!(cfg_used["mask"]["q_t"], serde_json::json!(0.8));
    assert_eq!(cfg_used["mask"]["m_s"], serde_json::json!(2));
    assert!(root.join("s1/best.ckpt").exists());
    assert!(root.join("s1/checkpoints/epoch0.ckpt").exists());

    // Stage II from the pre-trained encoder.
    assert_ok(&pstmo(
        &[
            "finetune",
            "--config",
            "cfg.json",
            "--out",
            "s2",
            "--from-pretrained",
            "s1/best.ckpt",
        ],
        root,
    ));
    assert!(root.join("s2/best.ckpt").exists());
    assert!(root.join("s2/report.json").exists());

    // Zero-epoch fine-tune emits the initial checkpoint and metrics only.
    assert_ok(&pstmo(
        &[
            "finetune", "--config", "cfg.json", "--out", "s2zero", "--epochs", "0",
        ],
        root,
    ));
    assert!(root.join("s2zero/checkpoints/epoch0.ckpt").exists());
    let metrics = fs::read_to_string(root.join("s2zero/metrics.csv")).unwrap();
    assert!(metrics.starts_with("epoch,split,"));
    assert_eq!(
        metrics.lines().count(),
        2,
        "only the initial-model row expected"
    );

    // Evaluation: documented CSV schema, and sigma = 0 is bit-identical to
    // the plain run.
    assert_ok(&pstmo(
        &[
            "eval",
            "--ckpt",
            "s2/best.ckpt",
            "--data",
            "data",
            "--out",
            "e0",
        ],
        root,
    ));
    let csv = fs::read_to_string(root.join("e0/metrics.csv")).unwrap();
    assert!(
        csv.starts_with("action,mpjpe,p_mpjpe,pck150,auc\n"),
        "csv: {csv}"
    );
    assert_ok(&pstmo(
        &[
            "eval",
            "--ckpt",
            "s2/best.ckpt",
            "--data",
            "data",
            "--out",
            "ezero",
            "--noise-sigma",
            "0",
        ],
        root,
    ));
    assert_eq!(
        fs::read(root.join("e0/metrics.csv")).unwrap(),
        fs::read(root.join("ezero/metrics.csv")).unwrap()
    );
    assert_eq!(
        fs::read(root.join("e0/report.json")).unwrap(),
        fs::read(root.join("ezero/report.json")).unwrap()
    );

    // Corrupted evaluations run and report.
    assert_ok(&pstmo(
        &[
            "eval",
            "--ckpt",
            "s2/best.ckpt",
            "--data",
            "data",
            "--out",
            "eshuf",
            "--shuffle",
            "--flip",
        ],
        root,
    ));
    assert_ok(&pstmo(
        &[
            "eval",
            "--ckpt",
            "s2/best.ckpt",
            "--data",
            "data",
            "--out",
            "enoise",
            "--noise-sigma",
            "0.05",
        ],
        root,
    ));

    // A stage-I checkpoint is rejected for evaluation.
    let wrong = pstmo(&["eval", "--ckpt", "s1/best.ckpt", "--data", "data"], root);
    assert_eq!(wrong.status.code(), Some(3));

    // Attention export: one CSV and one SVG per (module, layer, head).
    assert_ok(&pstmo(
        &[
            "attn",
            "--ckpt",
            "s2/best.ckpt",
            "--data",
            "data",
            "--window-index",
            "4",
            "--out",
            "attn2",
        ],
        root,
    ));
    let files: Vec<String> = fs::read_dir(root.join("attn2"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    let tem_csv = files
        .iter()
        .filter(|f| f.starts_with("stage2_tem_") && f.ends_with(".csv"))
        .count();
    assert_eq!(
        tem_csv, 4,
        "expected tem_layers * heads CSV files, got {files:?}"
    );
    let mofa_csv = files
        .iter()
        .filter(|f| f.starts_with("stage2_mofa_") && f.ends_with(".csv"))
        .count();
    assert_eq!(mofa_csv, 8);
    assert!(files.contains(&"meta.json".to_string()));

    assert_ok(&pstmo(
        &[
            "attn",
            "--ckpt",
            "s1/best.ckpt",
            "--data",
            "data",
            "--window-index",
            "4",
            "--out",
            "attn1",
        ],
        root,
    ));
    let meta: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(root.join("attn1/meta.json")).unwrap()).unwrap();
    let dec_entry = meta
        .as_array()
        .unwrap()
        .iter()
        .find(|m| m["module"] == "dec")
        .expect("decoder map present");
    assert!(
        dec_entry["partition"].is_array(),
        "decoder map carries the a/b partition"
    );
}
