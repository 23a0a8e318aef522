//! Run directories, manifests and plot-data bundles.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::eval::read_eval_csv;
use crate::flops::mdm_over_ar_ratio;
use crate::trainer::{read_metrics, train_with, MetricsRecord, TrainConfig, TrainData, TrainOutcome};

/// Overrides the default `runs` root.
pub const RUNS_ENV: &str = "DLMLAB_RUNS";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
pub const PLOT_HEADER: &str = "step,series,metric,value";

pub fn runs_root(explicit: Option<&Path>) -> PathBuf {
    match explicit {
        Some(p) => p.to_path_buf(),
        None => std::env::var_os(RUNS_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs")),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    /// Key=value snapshot of the config that produced the run.
    pub config: String,
    pub version: String,
    pub seed: u64,
    pub started: u64,
    pub finished: u64,
    /// Relative path → sha256 hex of every artifact in the run directory.
    pub files: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn config(&self) -> Result<TrainConfig> {
        TrainConfig::from_kv(&self.config)
    }

    pub fn load(run_dir: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(run_dir.join("manifest.json"))?)?)
    }

    /// Files whose current checksum differs from the recorded one, or that
    /// are missing.
    pub fn verify(&self, run_dir: &Path) -> Vec<String> {
        self.files
            .iter()
            .filter(|(rel, sum)| sha256_file(&run_dir.join(rel)).ok().as_ref() != Some(*sum))
            .map(|(rel, _)| rel.clone())
            .collect()
    }
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let digest = Sha256::digest(fs::read(path)?);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

fn inventory(dir: &Path, base: &Path, out: &mut BTreeMap<String, String>) -> Result<()> {
    let mut entries: Vec<_> = fs::read_dir(dir)?.collect::<std::io::Result<_>>()?;
    entries.sort_by_key(|e| e.file_name());
    for e in entries {
        let path = e.path();
        let rel = path.strip_prefix(base).unwrap_or(&path).to_string_lossy().replace('\\', "/");
        if rel == "manifest.json" || rel.ends_with(".tmp") {
            continue;
        }
        if e.file_type()?.is_dir() {
            inventory(&path, base, out)?;
        } else {
            out.insert(rel, sha256_file(&path)?);
        }
    }
    Ok(())
}

pub fn write_manifest(run_dir: &Path, cfg: &TrainConfig, started: u64) -> Result<RunManifest> {
    let mut files = BTreeMap::new();
    inventory(run_dir, run_dir, &mut files)?;
    let m = RunManifest {
        config: cfg.to_kv(),
        version: VERSION.to_string(),
        seed: cfg.seed,
        started,
        finished: now(),
        files,
    };
    fs::write(run_dir.join("manifest.json"), serde_json::to_string_pretty(&m)?)?;
    Ok(m)
}

/// Trains one run inside `run_dir` (config snapshot, metrics, checkpoints,
/// manifest). With `resume`, a finished run is returned without training.
pub fn run_experiment(cfg: &TrainConfig, data: &TrainData, run_dir: &Path, resume: bool) -> Result<TrainOutcome> {
    cfg.validate()?;
    fs::create_dir_all(run_dir)?;
    let cfg_path = run_dir.join("config");
    if resume && cfg_path.exists() {
        let old = TrainConfig::from_kv(&fs::read_to_string(&cfg_path)?)?;
        let mut a = old.clone();
        let mut b = cfg.clone();
        a.stop_after = 0;
        b.stop_after = 0;
        if a != b {
            return Err(Error::Config(format!("{} holds a run with a different config", run_dir.display())));
        }
    }
    fs::write(&cfg_path, cfg.to_kv())?;
    let started = now();
    let out = train_with(cfg, data, run_dir, resume)?;
    write_manifest(run_dir, cfg, started)?;
    Ok(out)
}

/// What `emit_plots` wrote and which runs it had to leave out.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PlotReport {
    pub files: Vec<PathBuf>,
    pub series: Vec<String>,
    pub missing: Vec<(PathBuf, String)>,
}

struct RunSeries {
    name: String,
    metrics: Vec<MetricsRecord>,
    dir: PathBuf,
}

fn push_rows(out: &mut String, step: impl std::fmt::Display, series: &str, metric: &str, value: Option<f64>) {
    if let Some(v) = value {
        out.push_str(&format!("{step},{series},{metric},{v}\n"));
    }
}

/// Lists run directories under `dir`: `dir` itself when it holds a
/// `metrics.csv` or `config`, otherwise its immediate subdirectories that
/// do.
pub fn discover_runs(dir: &Path) -> Result<Vec<PathBuf>> {
    if dir.join("metrics.csv").exists() || dir.join("config").exists() {
        return Ok(vec![dir.to_path_buf()]);
    }
    let mut runs: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.join("metrics.csv").exists() || p.join("config").exists())
        .collect();
    runs.sort();
    Ok(runs)
}

/// Writes tidy `step,series,metric,value` CSVs into `out_dir`:
/// `crossover.csv` (every metric of every run), `put_together.csv`
/// (validation CE and cloze accuracy overlays), `delta_nll.csv` (eval
/// series) and `flops_sweep.csv` (compute ratio of the first run's model
/// across sequence lengths). Derived only from files, so re-running is
/// byte-identical.
pub fn emit_plots(run_dirs: &[PathBuf], out_dir: &Path) -> Result<PlotReport> {
    let mut report = PlotReport::default();
    let mut runs = Vec::new();
    for d in run_dirs {
        let name = d.file_name().map_or_else(|| d.display().to_string(), |n| n.to_string_lossy().into_owned());
        match read_metrics(&d.join("metrics.csv")) {
            Ok(m) if !m.is_empty() => runs.push(RunSeries {
                name,
                metrics: m,
                dir: d.clone(),
            }),
            Ok(_) => report.missing.push((d.clone(), "metrics.csv has no rows".into())),
            Err(e) => report.missing.push((d.clone(), e.to_string())),
        }
    }
    if runs.is_empty() {
        return Err(Error::Invalid(format!("no completed run among {} directories", run_dirs.len())));
    }
    fs::create_dir_all(out_dir)?;

    let mut crossover = format!("{PLOT_HEADER}\n");
    let mut together = format!("{PLOT_HEADER}\n");
    let mut delta = format!("{PLOT_HEADER}\n");
    for r in &runs {
        report.series.push(r.name.clone());
        for m in &r.metrics {
            let s = &r.name;
            push_rows(&mut crossover, m.step, s, "train_loss", Some(m.train_loss));
            push_rows(&mut crossover, m.step, s, "lr", Some(m.lr));
            push_rows(&mut crossover, m.step, s, "val_ce", m.val_ce);
            push_rows(&mut crossover, m.step, s, "mc_accuracy", m.mc_accuracy);
            push_rows(&mut crossover, m.step, s, "delta_nll", m.delta_nll);
            push_rows(&mut crossover, m.step, s, "epoch", Some(m.epoch));
            push_rows(&mut crossover, m.step, s, "tokens_seen", Some(m.tokens_seen as f64));
            push_rows(&mut crossover, m.step, s, "flops_estimate", Some(m.flops_estimate));
            push_rows(&mut together, m.step, s, "val_ce", m.val_ce);
            push_rows(&mut together, m.step, s, "mc_accuracy", m.mc_accuracy);
        }
        match fs::read_to_string(r.dir.join("eval.csv")) {
            Ok(text) => {
                for e in read_eval_csv(&text)? {
                    push_rows(&mut delta, e.step, &r.name, "nll_truth", Some(e.nll_truth));
                    push_rows(&mut delta, e.step, &r.name, "nll_others", Some(e.nll_others));
                    push_rows(&mut delta, e.step, &r.name, "delta_nll", Some(e.delta));
                    push_rows(&mut delta, e.step, &r.name, "val_ce", Some(e.val_ce).filter(|v| v.is_finite()));
                }
            }
            Err(_) => report.missing.push((r.dir.clone(), "no eval.csv".into())),
        }
    }

    let mut sweep = format!("{PLOT_HEADER}\n");
    let spec = fs::read_to_string(runs[0].dir.join("config"))
        .ok()
        .and_then(|t| TrainConfig::from_kv(&t).ok())
        .map(|c| c.model_spec())
        .unwrap_or_default();
    let mut len = 16;
    while len <= 4096 {
        let ratio = mdm_over_ar_ratio(&spec, len, len)?;
        push_rows(&mut sweep, len, "steps=len", "mdm_over_ar_cached", Some(ratio));
        len *= 2;
    }

    for (file, body) in [
        ("crossover.csv", crossover),
        ("put_together.csv", together),
        ("delta_nll.csv", delta),
        ("flops_sweep.csv", sweep),
    ] {
        let p = out_dir.join(file);
        fs::write(&p, body)?;
        report.files.push(p);
    }
    let mut text = String::new();
    for (d, why) in &report.missing {
        text.push_str(&format!("{}: {why}\n", d.display()));
    }
    let p = out_dir.join("report.txt");
    fs::write(&p, text)?;
    report.files.push(p);
    Ok(report)
}
