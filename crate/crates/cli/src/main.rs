use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use dlmlab::data::synth::{write_synthetic, SynthConfig};
use dlmlab::data::{detokenize_lossy, load_documents, tokenize, BOS};
use dlmlab::eval::{load_items, mc_accuracy, validation_ce, ScoringConfig};
use dlmlab::experiment::{discover_runs, emit_plots, run_experiment, runs_root};
use dlmlab::flops::{infer_flops_ar, infer_flops_mdm, train_flops};
use dlmlab::objectives::ObjectiveKind;
use dlmlab::samplers::{ar_generate, mdm_complete, StepGrid};
use dlmlab::schedule::NoiseSchedule;
use dlmlab::tensor::Rng;
use dlmlab::trainer::{latest_checkpoint, run_crossover_suite, Paradigm, TrainConfig, TrainData};
use dlmlab::transformer::{AttentionMode, Model, ModelSpec};

/// Usage problems detected after argument parsing.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

#[derive(Parser)]
#[command(name = "dlmlab", version, about = "Autoregressive vs masked-diffusion language models under data constraints")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train one run.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Run root; defaults to $DLMLAB_RUNS or ./runs.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        name: Option<String>,
        /// Extra `key=value` overrides, applied after the config file.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        /// Continue from the latest checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Score a checkpoint on cloze items and held-out text.
    Eval {
        /// Run directory; uses its latest checkpoint and config.
        #[arg(long, conflicts_with = "checkpoint")]
        run: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        items: Option<PathBuf>,
        #[arg(long)]
        val: Option<PathBuf>,
        #[arg(long, default_value_t = 1234)]
        seed: u64,
    },
    /// Sample text from a checkpoint.
    Generate {
        #[arg(long, conflicts_with = "checkpoint")]
        run: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "")]
        prompt: String,
        #[arg(long, default_value_t = 64)]
        len: usize,
        /// Reverse steps for diffusion models; defaults to `len`.
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, default_value_t = 0.0)]
        temperature: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        no_cache: bool,
    },
    /// Training and inference FLOPs as JSON.
    Flops {
        #[arg(long)]
        seq_len: usize,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, default_value_t = 0)]
        prompt_len: usize,
        #[arg(long, value_enum, default_value_t = Preset::Billion)]
        preset: Preset,
        /// Take the model shape from a run config instead of a preset.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Training tokens to price.
        #[arg(long)]
        train_tokens: Option<f64>,
    },
    /// One run per (unique budget, paradigm).
    Suite {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        budgets: Vec<usize>,
        /// e.g. `ar,mdm,ar+input_noise@0.1`
        #[arg(long, value_delimiter = ',', default_value = "ar,mdm")]
        paradigms: Vec<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Tidy CSV bundles from run directories.
    EmitPlots {
        /// Run directories, or a suite directory holding runs.
        #[arg(long = "runs", required = true, num_args = 1..)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the synthetic biography corpus and cloze items.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2024)]
        seed: u64,
        #[arg(long)]
        train_docs: Option<usize>,
        #[arg(long)]
        people: Option<usize>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Billion,
    Desk,
}

fn load_config(path: &Path, seed: Option<u64>, set: &[String]) -> anyhow::Result<TrainConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| usage(format!("cannot read {}: {e}", path.display())))?;
    let mut cfg = TrainConfig::parse_any(&text)?;
    // relative data paths resolve against the config file
    let base = path.parent().unwrap_or(Path::new("."));
    for p in [&mut cfg.train_path, &mut cfg.val_path, &mut cfg.cloze_path].into_iter().flatten() {
        if p.is_relative() {
            *p = base.join(&*p);
        }
    }
    for kv in set {
        let (k, v) = kv.split_once('=').ok_or_else(|| usage(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn resolve_checkpoint(run: &Option<PathBuf>, checkpoint: &Option<PathBuf>) -> anyhow::Result<(PathBuf, Option<TrainConfig>)> {
    match (run, checkpoint) {
        (Some(dir), _) => {
            let (_, ckpt) = latest_checkpoint(dir).ok_or_else(|| usage(format!("{} has no checkpoint", dir.display())))?;
            let cfg = TrainConfig::from_kv(&std::fs::read_to_string(dir.join("config")).context("reading run config")?)?;
            Ok((ckpt, Some(cfg)))
        }
        (None, Some(c)) => Ok((c.clone(), None)),
        (None, None) => Err(usage("either --run or --checkpoint is required")),
    }
}

fn kind_of(model: &Model, cfg: Option<&TrainConfig>) -> ObjectiveKind {
    match (cfg, model.mode()) {
        (Some(c), _) => c.objective,
        (None, AttentionMode::Causal) => ObjectiveKind::Ar,
        (None, AttentionMode::Bidirectional) => ObjectiveKind::Mdm,
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.cmd {
        Cmd::Train {
            config,
            seed,
            out,
            name,
            set,
            resume,
        } => {
            let mut cfg = load_config(&config, seed, &set)?;
            if let Some(n) = name {
                cfg.name = n;
            }
            let dir = runs_root(out.as_deref()).join(&cfg.name);
            let data = TrainData::load(&cfg)?;
            let o = run_experiment(&cfg, &data, &dir, resume)?;
            let last = o.metrics.last();
            println!(
                "{}",
                serde_json::to_string_pretty(&json!({
                    "run_dir": dir,
                    "last_step": o.last_step,
                    "total_steps": o.total_steps,
                    "completed": o.completed,
                    "train_loss": last.map(|m| m.train_loss),
                    "val_ce": last.and_then(|m| m.val_ce),
                    "mc_accuracy": last.and_then(|m| m.mc_accuracy),
                }))?
            );
        }
        Cmd::Eval {
            run,
            checkpoint,
            items,
            val,
            seed,
        } => {
            let (ckpt, cfg) = resolve_checkpoint(&run, &checkpoint)?;
            let model: Model = Model::load(&ckpt)?;
            let kind = kind_of(&model, cfg.as_ref());
            let items_path = items.or_else(|| cfg.as_ref().and_then(|c| c.cloze_path.clone()));
            let val_path = val.or_else(|| cfg.as_ref().and_then(|c| c.val_path.clone()));
            if items_path.is_none() && val_path.is_none() {
                bail!(usage("nothing to evaluate: pass --items and/or --val"));
            }
            let scoring = match &cfg {
                Some(c) => ScoringConfig {
                    t_grid: c.scoring_t_grid.clone(),
                    draws_per_t: c.scoring_draws,
                    seed,
                },
                None => ScoringConfig {
                    seed,
                    ..Default::default()
                },
            };
            let mut report = json!({ "checkpoint": ckpt, "objective": kind.to_string() });
            if let Some(p) = items_path {
                let r = mc_accuracy(&model, &load_items(&p)?, kind, &scoring)?;
                report["mc_accuracy"] = json!(r.accuracy);
                report["nll_truth"] = json!(r.nll_truth);
                report["nll_others"] = json!(r.nll_others);
                report["delta_nll"] = json!(r.delta());
                report["scored"] = json!(r.scored);
                report["skipped"] = json!(r.skipped);
            }
            if let Some(p) = val_path {
                let docs = load_documents(&p)?;
                let windows = dlmlab::data::ValidationCursor::from_documents(&docs, model.spec().seq_len, usize::MAX, false)?.windows().to_vec();
                report["val_ce"] = json!(validation_ce(&model, kind, &windows, seed, 8)?);
            }
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Cmd::Generate {
            run,
            checkpoint,
            prompt,
            len,
            steps,
            temperature,
            seed,
            no_cache,
        } => {
            let (ckpt, _) = resolve_checkpoint(&run, &checkpoint)?;
            let model: Model = Model::load(&ckpt)?;
            let mut ids = vec![BOS];
            ids.extend(tokenize(prompt.as_bytes()));
            if ids.len() + len > model.spec().seq_len {
                bail!(usage(format!("prompt + len = {} exceeds the context of {}", ids.len() + len, model.spec().seq_len)));
            }
            let mut rng = Rng::new(seed);
            let out = match model.mode() {
                AttentionMode::Causal => ar_generate(&model, &ids, len, temperature, !no_cache, &mut rng)?,
                AttentionMode::Bidirectional => {
                    let grid = StepGrid::uniform(steps.unwrap_or(len).max(1))?;
                    mdm_complete(&model, &ids, len, &grid, &NoiseSchedule::Linear, temperature, &mut rng)?
                }
            };
            println!("{}", detokenize_lossy(&out[1..]));
        }
        Cmd::Flops {
            seq_len,
            steps,
            prompt_len,
            preset,
            config,
            train_tokens,
        } => {
            let mut spec = match (&config, preset) {
                (Some(p), _) => load_config(p, None, &[])?.model_spec(),
                (None, Preset::Billion) => ModelSpec::billion_scale(),
                (None, Preset::Desk) => ModelSpec::default(),
            };
            let steps = steps.unwrap_or(seq_len);
            spec.seq_len = spec.seq_len.max(prompt_len + seq_len);
            let ar_cached = infer_flops_ar(&spec, prompt_len, seq_len, true)?;
            let ar_full = infer_flops_ar(&spec, prompt_len, seq_len, false)?;
            let mdm = infer_flops_mdm(&spec, prompt_len + seq_len, steps)?;
            let mut report = json!({
                "seq_len": seq_len,
                "steps": steps,
                "prompt_len": prompt_len,
                "ar_cached": ar_cached,
                "ar_uncached": ar_full,
                "mdm": mdm,
                "ratio": mdm.total / ar_cached.total,
                "ratio_vs_uncached": mdm.total / ar_full.total,
            });
            if let Some(t) = train_tokens {
                report["train"] = json!(train_flops(&spec, t)?);
            }
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Cmd::Suite {
            config,
            budgets,
            paradigms,
            seed,
            out,
            set,
        } => {
            let base = load_config(&config, seed, &set)?;
            let paradigms = paradigms.iter().map(|p| p.parse::<Paradigm>()).collect::<Result<Vec<_>, _>>()?;
            let data = TrainData::load(&base)?;
            let runner = |c: &TrainConfig, d: &Path| run_experiment(c, &data, d, true);
            let root = runs_root(out.as_deref());
            let o = run_crossover_suite(&base, &budgets, &paradigms, &root, &runner)?;
            println!("{}", o.aggregate.display());
            if !o.failures.is_empty() {
                for (n, e) in &o.failures {
                    eprintln!("{n}: {e}");
                }
                bail!("{} of {} member runs failed", o.failures.len(), o.members.len());
            }
        }
        Cmd::EmitPlots { runs, out } => {
            let mut dirs = Vec::new();
            for r in &runs {
                dirs.extend(discover_runs(r).with_context(|| format!("listing {}", r.display()))?);
            }
            let out = out.unwrap_or_else(|| match runs.as_slice() {
                [one] => one.join("plots"),
                _ => PathBuf::from("plots"),
            });
            let report = emit_plots(&dirs, &out)?;
            for f in &report.files {
                println!("{}", f.display());
            }
            for (d, why) in &report.missing {
                eprintln!("skipped {}: {why}", d.display());
            }
        }
        Cmd::Synth {
            out,
            seed,
            train_docs,
            people,
        } => {
            let mut cfg = SynthConfig {
                seed,
                ..Default::default()
            };
            if let Some(n) = train_docs {
                cfg.train_docs = n;
            }
            if let Some(n) = people {
                cfg.n_people = n;
            }
            let p = write_synthetic(&out, &cfg)?;
            println!("{}\n{}\n{}", p.train.display(), p.heldout.display(), p.cloze.display());
        }
    }
    Ok(())
}

fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<Usage>().is_some() {
        return 2;
    }
    match e.downcast_ref::<dlmlab::Error>() {
        Some(err) if err.is_config() => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
