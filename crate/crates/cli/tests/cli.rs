use std::path::Path;
use std::process::Command;

use serde_json::Value;

const TINY: &str = r#"
seed = 4
diffusion_steps = 6

[data]
n_episodes = 60

[model]
hidden_width = 8
n_blocks = 1
ple_dim = 4

[pretrain]
n_updates = 15

[inversion]
n_adapt = 10

[reward]
n_updates = 3

[finetune]
n_updates = 3

[eval]
n_query = [6]
seeds = [0]
n_samples = 4
methods = ["diffuser", "preference_inversion", "guided_sampling"]
"#;

fn plediff(dir: &Path, args: &[&str]) -> std::process::Output {
    let out = Command::new(env!("CARGO_BIN_EXE_plediff"))
        .current_dir(dir)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "plediff {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn json(path: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

#[test]
fn subcommands_run_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("tiny.toml"), TINY).unwrap();
    let cfg = ["--config", "tiny.toml"];

    plediff(d, &[&["gen-data"][..], &cfg, &["--out", "data"]].concat());
    assert!(d.join("data/manifest.json").exists());

    plediff(d, &[&["pretrain"][..], &cfg, &["--out", "run"]].concat());
    assert!(d.join("run/model.ckpt").exists());
    let losses = std::fs::read_to_string(d.join("run/loss.csv")).unwrap();
    assert_eq!(losses.lines().count(), 16);

    plediff(
        d,
        &[
            &["adapt"][..],
            &cfg,
            &[
                "--checkpoint",
                "run/model.ckpt",
                "--oracle-queries",
                "8",
                "--out",
                "adapt",
            ],
        ]
        .concat(),
    );
    let adapted = json(&d.join("adapt/adapted.json"));
    assert!(adapted["n_labels"].as_u64().unwrap() > 0);
    assert_eq!(adapted["z_w"].as_array().unwrap().len(), 4);

    // Re-adapting from the written label file reproduces the latents.
    plediff(
        d,
        &[
            &["adapt"][..],
            &cfg,
            &[
                "--checkpoint",
                "run/model.ckpt",
                "--labels",
                "adapt/labels.jsonl",
                "--out",
                "again",
            ],
        ]
        .concat(),
    );
    let again = json(&d.join("again/adapted.json"));
    assert_eq!(again["z_w"], adapted["z_w"]);
    assert_eq!(again["label_sha256"], adapted["label_sha256"]);

    plediff(
        d,
        &[
            &["sample"][..],
            &cfg,
            &[
                "--checkpoint",
                "run/model.ckpt",
                "--adapted",
                "adapt/adapted.json",
                "--n",
                "3",
                "--out",
                "samples",
            ],
        ]
        .concat(),
    );
    let samples = json(&d.join("samples/samples.json"));
    assert_eq!(samples["guidance"], "dual");
    assert_eq!(samples["samples"].as_array().unwrap().len(), 3);

    plediff(
        d,
        &[
            &["eval"][..],
            &cfg,
            &["--checkpoint", "run/model.ckpt", "--out", "eval"],
        ]
        .concat(),
    );
    let csv = std::fs::read_to_string(d.join("eval/report.csv")).unwrap();
    assert_eq!(
        csv.lines().next().unwrap(),
        "method,n_query,n_adapt,seed,metric,value"
    );
    let reports = std::fs::read_to_string(d.join("eval/reports.jsonl")).unwrap();
    assert_eq!(reports.lines().count(), 3);
    assert!(json(&d.join("eval/probe.json"))["accuracy"]
        .as_f64()
        .is_some());
    assert!(d.join("eval/summary.json").exists());
}

#[test]
fn bad_config_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.toml"), "[model]\nwidht = 3\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_plediff"))
        .current_dir(dir.path())
        .args(["gen-data", "--config", "bad.toml"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("widht"));
}

#[test]
fn missing_checkpoint_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_plediff"))
        .current_dir(dir.path())
        .args(["sample", "--checkpoint", "absent.ckpt"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("absent.ckpt"));
}
