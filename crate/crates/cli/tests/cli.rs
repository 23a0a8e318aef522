use std::path::Path;
use std::process::{Command, Output};

fn dlmlab(args: &[&str], runs: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dlmlab"))
        .args(args)
        .env("DLMLAB_RUNS", runs)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn tiny_config(dir: &Path) -> std::path::PathBuf {
    let out = dlmlab(&["synth", "--out", dir.join("data").to_str().unwrap(), "--train-docs", "60"], dir);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let cfg = dir.join("c.txt");
    std::fs::write(
        &cfg,
        "name = tiny\nseq_len = 64\nn_layers = 1\nd_model = 16\nn_heads = 2\nbatch_size = 2\n\
         unique_tokens = 512\ntotal_tokens = 1024\nwarmup_steps = 1\neval_every = 4\ncheckpoint_every = 4\n\
         val_windows = 2\ncloze_items = 5\nscoring_draws = 1\n\
         train_path = data/train.txt\nval_path = data/heldout.txt\ncloze_path = data/cloze.jsonl\n",
    )
    .unwrap();
    cfg
}

#[test]
fn train_creates_a_run_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let runs = tmp.path().join("runs");
    let out = dlmlab(&["train", "--config", cfg.to_str().unwrap()], &runs);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let run = runs.join("tiny");
    for f in ["config", "manifest.json", "metrics.csv", "eval.csv"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["completed"], true);

    let ev = dlmlab(&["eval", "--run", run.to_str().unwrap()], &runs);
    assert_eq!(ev.status.code(), Some(0), "{}", String::from_utf8_lossy(&ev.stderr));
    let ev: serde_json::Value = serde_json::from_slice(&ev.stdout).unwrap();
    assert!(ev["mc_accuracy"].as_f64().is_some() && ev["val_ce"].as_f64().is_some());

    let gen = dlmlab(&["generate", "--run", run.to_str().unwrap(), "--prompt", "This is", "--len", "8"], &runs);
    assert_eq!(gen.status.code(), Some(0), "{}", String::from_utf8_lossy(&gen.stderr));

    let plots = dlmlab(&["emit-plots", "--runs", run.to_str().unwrap()], &runs);
    assert_eq!(plots.status.code(), Some(0));
    assert!(run.join("plots/crossover.csv").exists());
}

#[test]
fn flops_reports_the_ratio() {
    let tmp = tempfile::tempdir().unwrap();
    let out = dlmlab(&["flops", "--seq-len", "16", "--steps", "16"], tmp.path());
    assert_eq!(out.status.code(), Some(0));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let ratio = v["ratio"].as_f64().unwrap();
    assert!((12.8..=19.2).contains(&ratio), "{ratio}");
}

#[test]
fn usage_and_config_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = dlmlab(&["frobnicate"], tmp.path());
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("Usage"));
    assert_eq!(dlmlab(&["train", "--config", "x", "--bogus"], tmp.path()).status.code(), Some(2));
    let cfg = tmp.path().join("bad.txt");
    std::fs::write(&cfg, "no_such_key = 3\n").unwrap();
    assert_eq!(dlmlab(&["train", "--config", cfg.to_str().unwrap()], tmp.path()).status.code(), Some(2));
    assert_eq!(dlmlab(&["train", "--config", "/does/not/exist"], tmp.path()).status.code(), Some(2));
}

#[test]
fn runtime_failures_exit_1() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("c.txt");
    std::fs::write(&cfg, "train_path = missing.txt\n").unwrap();
    assert_eq!(dlmlab(&["train", "--config", cfg.to_str().unwrap()], tmp.path()).status.code(), Some(1));
}

#[test]
fn emit_plots_on_empty_dir_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let empty = tmp.path().join("empty");
    std::fs::create_dir(&empty).unwrap();
    let out = dlmlab(&["emit-plots", "--runs", empty.to_str().unwrap(), "--out", tmp.path().join("p").to_str().unwrap()], tmp.path());
    assert_ne!(out.status.code(), Some(0));
}

#[test]
fn suite_writes_an_aggregate() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let runs = tmp.path().join("runs");
    let out = dlmlab(&["suite", "--config", cfg.to_str().unwrap(), "--budgets", "512", "--paradigms", "ar,mdm"], &runs);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let agg = std::fs::read_to_string(runs.join("tiny/aggregate.csv")).unwrap();
    assert!(agg.lines().any(|l| l.starts_with("u512-ar,")));
    assert!(agg.lines().any(|l| l.starts_with("u512-mdm,")));
}
