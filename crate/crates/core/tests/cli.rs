//! Command-line behaviour: pipeline outputs, exit codes and file formats.

use std::path::Path;
use std::process::{Command, Output};

fn mdtal(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mdtal"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("spawn mdtal")
}

fn ok(args: &[&str], dir: &Path) -> Output {
    let out = mdtal(args, dir);
    assert!(
        out.status.success(),
        "mdtal {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

/// Small dataset plus a one-epoch config, shared by the tests below.
fn setup(dir: &Path) {
    ok(&["gen-data", "--n", "36", "--seed", "3", "-o", "data"], dir);
    std::fs::write(
        dir.join("cfg.json"),
        r#"{"data": "data", "model": {"d_model": 16, "n_heads": 2, "d_ff": 32, "n_layers": 1},
            "train": {"epochs": 1, "accumulation": 2}}"#,
    )
    .unwrap();
}

#[test]
fn pipeline_writes_expected_files() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    setup(dir);
    for f in ["train.jsonl", "eval.jsonl", "task.json", "manifest.json"] {
        assert!(dir.join("data").join(f).is_file(), "data/{f}");
    }
    let n_eval = std::fs::read_to_string(dir.join("data/eval.jsonl"))
        .unwrap()
        .lines()
        .count();
    assert_eq!(n_eval, 6);

    ok(
        &["train", "-c", "cfg.json", "--seed", "1", "-o", "run"],
        dir,
    );
    for f in [
        "model.bin",
        "state.bin",
        "log.jsonl",
        "eval.json",
        "manifest.json",
    ] {
        assert!(dir.join("run").join(f).is_file(), "run/{f}");
    }
    let ev = json(&dir.join("run/eval.json"));
    assert!(ev["rtl"]["miou"].is_number());
    assert!(ev["time_later_fraction"].is_number());
    let manifest = json(&dir.join("run/manifest.json"));
    assert_eq!(manifest["command"], "train");
    assert_eq!(manifest["outputs"][0]["sha256"].as_str().unwrap().len(), 64);

    ok(
        &[
            "infer",
            "--ckpt",
            "run/model.bin",
            "--data",
            "data",
            "--dump-trajectory",
            "traj",
            "-o",
            "preds.jsonl",
        ],
        dir,
    );
    assert!(dir.join("preds.jsonl.manifest.json").is_file());
    assert_eq!(std::fs::read_dir(dir.join("traj")).unwrap().count(), n_eval);

    ok(
        &[
            "eval",
            "--pred",
            "preds.jsonl",
            "--data",
            "data",
            "-o",
            "scores.json",
        ],
        dir,
    );
    let scored = json(&dir.join("scores.json"));
    let direct = mdtal(&["eval", "--ckpt", "run/model.bin", "--data", "data"], dir);
    let direct: serde_json::Value = serde_json::from_slice(&direct.stdout).unwrap();
    assert_eq!(scored["rtl"], direct["rtl"]);
}

#[test]
fn resume_finishes_without_retraining() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    setup(dir);
    ok(&["train", "-c", "cfg.json", "-o", "run"], dir);
    ok(
        &[
            "train",
            "-c",
            "cfg.json",
            "--resume",
            "run/state.bin",
            "-o",
            "again",
        ],
        dir,
    );
    assert_eq!(
        std::fs::read(dir.join("run/model.bin")).unwrap(),
        std::fs::read(dir.join("again/model.bin")).unwrap()
    );
}

#[test]
fn dump_traj_writes_csv() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    setup(dir);
    ok(&["train", "-c", "cfg.json", "-o", "run"], dir);
    let out = ok(
        &[
            "dump-traj",
            "--ckpt",
            "run/model.bin",
            "--data",
            "data",
            "--example",
            "2",
        ],
        dir,
    );
    let csv = String::from_utf8(out.stdout).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next(),
        Some("step,tuple_id,soft_iou,gate,revealed_count")
    );
    assert!(lines.count() > 0);

    let out = mdtal(
        &[
            "dump-traj",
            "--ckpt",
            "run/model.bin",
            "--data",
            "data",
            "--example",
            "99",
        ],
        dir,
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("out of range"));
}

#[test]
fn ablate_with_custom_grid() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    setup(dir);
    std::fs::write(
        dir.join("grid.json"),
        r#"[{"name": "plain", "overrides": {"weights": {"lambda_iou": 0.0}}},
            {"name": "reward", "overrides": {}}]"#,
    )
    .unwrap();
    ok(
        &[
            "ablate",
            "--grid",
            "grid.json",
            "-c",
            "cfg.json",
            "--seeds",
            "0",
            "-o",
            "abl",
        ],
        dir,
    );
    let report = json(&dir.join("abl/report.json"));
    let names: Vec<&str> = report["rows"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["name"].as_str().unwrap())
        .collect();
    assert_eq!(names, ["plain", "reward"]);
    let md = std::fs::read_to_string(dir.join("abl/report.md")).unwrap();
    assert!(md.contains("| plain |"));
}

#[test]
fn usage_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let out = mdtal(&["train", "--no-such-flag"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    let out = mdtal(&["gen-data", "--profile", "video", "-o", "x"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_1() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let out = mdtal(
        &["eval", "--pred", "missing.jsonl", "--data", "nowhere"],
        dir,
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error: "));

    std::fs::write(dir.join("bad.json"), r#"{"train": {"lr": -1.0}}"#).unwrap();
    ok(&["gen-data", "--n", "12", "-o", "data"], dir);
    let out = mdtal(
        &["train", "-c", "bad.json", "--data", "data", "-o", "run"],
        dir,
    );
    assert_eq!(out.status.code(), Some(1));
}
