use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn mostat(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mostat")).args(args).output().expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn gen(dir: &Path, seed: &str) -> Output {
    mostat(&[
        "gen-data",
        "--out",
        dir.to_str().unwrap(),
        "--classes",
        "25",
        "--per-class",
        "20",
        "--image-shape",
        "3,8,8",
        "--seed",
        seed,
    ])
}

fn dir_contents(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = walk(dir).into_iter().map(|p| (p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap())).collect();
    files.sort();
    files
}

fn walk(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

fn write_config(root: &Path, epochs: usize) -> std::path::PathBuf {
    let text = format!(
        r#"{{
  "version": 1,
  "dataset": "data",
  "output_dir": "run",
  "seed": 5,
  "model": {{
    "backbone": {{"blocks": [{{"out_channels": 8, "pool": true}}, {{"out_channels": 8, "pool": false}}], "input_shape": [3, 8, 8], "normalization": "per_channel"}},
    "proj_dim": 8
  }},
  "train": {{"epochs": {epochs}, "batch_size": 8, "checkpoint_every": 1, "loss": {{"reduction": "mean"}}}}
}}"#
    );
    let path = root.join(format!("run{epochs}.json"));
    fs::write(&path, text).unwrap();
    path
}

#[test]
fn gen_data_is_byte_identical_for_a_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let out = gen(&a, "3");
    assert!(out.status.success(), "{}", stderr(&out));
    let summary: Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(summary["images"], 500);
    assert_eq!(summary["classes"]["base"], 15);
    assert!(gen(&b, "3").status.success());
    assert_eq!(dir_contents(&a), dir_contents(&b));
}

#[test]
fn gen_data_rejects_too_few_classes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = mostat(&["gen-data", "--out", tmp.path().to_str().unwrap(), "--classes", "6"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("classes"), "{}", stderr(&out));
}

#[test]
fn pretrain_then_eval_and_resume() {
    let tmp = tempfile::tempdir().unwrap();
    assert!(gen(&tmp.path().join("data"), "1").status.success());
    let cfg = write_config(tmp.path(), 2);
    let out = mostat(&["pretrain", cfg.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    let run = tmp.path().join("run");
    for f in ["checkpoint_epoch0001.bin", "checkpoint_epoch0002.bin", "checkpoint_final.bin", "config.json"] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    let log = fs::read_to_string(run.join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);

    let ckpt = run.join("checkpoint_final.bin");
    let sidecar = tmp.path().join("episodes.jsonl");
    let eval = |branches: &str| {
        mostat(&[
            "eval",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--dataset",
            tmp.path().join("data").to_str().unwrap(),
            "--branches",
            branches,
            "--episodes",
            "30",
            "--seed",
            "2",
            "--episodes-out",
            sidecar.to_str().unwrap(),
        ])
    };
    let out = eval("1,2,3");
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    let summary: Value = serde_json::from_str(&text).unwrap();
    let keys: Vec<&String> = summary.as_object().unwrap().keys().collect();
    assert_eq!(keys, ["branch_mask", "checkpoint_id", "ci95", "episodes", "mean", "shot", "version", "way"]);
    assert_eq!(summary["branch_mask"], serde_json::json!([1, 2, 3]));
    assert_eq!(summary["episodes"], 30);
    assert_eq!(fs::read_to_string(&sidecar).unwrap().lines().count(), 30);
    assert_eq!(stdout(&eval("1,2,3")), text);
    let single: Value = serde_json::from_str(&stdout(&eval("1"))).unwrap();
    assert_eq!(single["branch_mask"], serde_json::json!([1]));

    let longer = write_config(tmp.path(), 3);
    let resume = run.join("checkpoint_epoch0002.bin");
    let out = mostat(&["pretrain", longer.to_str().unwrap(), "--resume", resume.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    let done: Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(done["epoch"], 3);
    assert!(run.join("checkpoint_epoch0003.bin").exists());
    assert_eq!(fs::read_to_string(run.join("train_log.jsonl")).unwrap().lines().count(), 3);
}

#[test]
fn output_dir_env_override() {
    let tmp = tempfile::tempdir().unwrap();
    assert!(gen(&tmp.path().join("data"), "1").status.success());
    let cfg = write_config(tmp.path(), 1);
    let elsewhere = tmp.path().join("elsewhere");
    let out = Command::new(env!("CARGO_BIN_EXE_mostat"))
        .args(["pretrain", cfg.to_str().unwrap()])
        .env("MOSTAT_OUTPUT_DIR", &elsewhere)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(elsewhere.join("checkpoint_final.bin").exists());
    assert!(!tmp.path().join("run").exists());
}

#[test]
fn pretrain_missing_dataset_names_the_field() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), 1);
    let out = mostat(&["pretrain", cfg.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("dataset"), "{}", stderr(&out));
}

#[test]
fn pretrain_lists_every_config_problem() {
    let tmp = tempfile::tempdir().unwrap();
    assert!(gen(&tmp.path().join("data"), "1").status.success());
    let path = tmp.path().join("bad.json");
    fs::write(
        &path,
        r#"{"version": 1, "dataset": "data", "model": {"backbone": {"blocks": [{"out_channels": 4, "pool": true}], "input_shape": [3, 8, 8]}}, "train": {"epochs": 0, "batch_size": 1}}"#,
    )
    .unwrap();
    let out = mostat(&["pretrain", path.to_str().unwrap()]);
    assert!(!out.status.success());
    let err = stderr(&out);
    assert!(err.contains("epochs") && err.contains("batch_size"), "{err}");
}

#[test]
fn theory_suite_passes_and_is_reproducible() {
    let args = ["theory", "--trials", "200", "--seed", "9"];
    let out = mostat(&args);
    assert!(out.status.success(), "{}", stderr(&out));
    let lines: Vec<Value> = stdout(&out).lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 400);
    assert_eq!(stdout(&mostat(&args)), stdout(&out));
}

#[test]
fn theory_with_zero_trials_warns() {
    let out = mostat(&["theory", "--trials", "0"]);
    assert!(out.status.success());
    assert!(stderr(&out).contains("warning"));
    assert!(stdout(&out).is_empty());
}

#[test]
fn gradcheck_reports_every_op() {
    let out = mostat(&["gradcheck", "--seed", "1"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let report: Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(report["passed"], true);
    let ops: Vec<&str> = report["cases"].as_array().unwrap().iter().map(|c| c["op"].as_str().unwrap()).collect();
    assert!(ops.iter().any(|o| o.contains("pool")), "{ops:?}");
    assert_eq!(stderr(&out).lines().count(), ops.len());
}

#[test]
fn threads_flag_is_accepted() {
    let out = mostat(&["--threads", "1", "theory", "--trials", "5"]);
    assert!(out.status.success(), "{}", stderr(&out));
}
