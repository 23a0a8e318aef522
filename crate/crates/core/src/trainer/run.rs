use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::optim::{clip_grad_norm, AdamW, Wsd};
use super::TrainConfig;
use crate::data::{load_documents, BatchStream, BudgetedCorpus, ValidationCursor};
use crate::error::{Error, Result};
use crate::eval::{self, load_items, mc_accuracy, validation_ce, McItem, NllRecord, ScoringConfig};
use crate::flops::train_flops;
use crate::objectives::{ar_loss_graph, ar_loss_with_input_noise_graph, mdm_loss_graph, InputNoiseOptions, MdmLossOptions, ObjectiveKind};
use crate::tensor::{Graph, Rng};
use crate::transformer::checkpoint::{read_blobs, write_blobs};
use crate::transformer::Model;
use crate::Token;

pub const METRICS_HEADER: &str = "step,epoch,train_loss,lr,val_ce,mc_accuracy,delta_nll,tokens_seen,flops_estimate";

/// One row of `metrics.csv`. Evaluation fields are absent when the run has
/// no validation or cloze data.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRecord {
    pub step: u64,
    pub epoch: f64,
    pub train_loss: f64,
    pub lr: f64,
    pub val_ce: Option<f64>,
    pub mc_accuracy: Option<f64>,
    pub delta_nll: Option<f64>,
    pub tokens_seen: u64,
    pub flops_estimate: f64,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl MetricsRecord {
    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{:e}",
            self.step,
            self.epoch,
            self.train_loss,
            self.lr,
            opt(self.val_ce),
            opt(self.mc_accuracy),
            opt(self.delta_nll),
            self.tokens_seen,
            self.flops_estimate
        )
    }

    pub fn from_csv_row(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 9 {
            return Err(Error::Invalid(format!("metrics row has {} fields: {line:?}", f.len())));
        }
        let num = |i: usize| -> Result<f64> { f[i].parse().map_err(|_| Error::Invalid(format!("bad number {:?} in {line:?}", f[i]))) };
        let maybe = |i: usize| -> Result<Option<f64>> { if f[i].is_empty() { Ok(None) } else { num(i).map(Some) } };
        Ok(MetricsRecord {
            step: f[0].parse().map_err(|_| Error::Invalid(format!("bad step in {line:?}")))?,
            epoch: num(1)?,
            train_loss: num(2)?,
            lr: num(3)?,
            val_ce: maybe(4)?,
            mc_accuracy: maybe(5)?,
            delta_nll: maybe(6)?,
            tokens_seen: f[7].parse().map_err(|_| Error::Invalid(format!("bad token count in {line:?}")))?,
            flops_estimate: num(8)?,
        })
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    parse_metrics(&fs::read_to_string(path)?)
}

pub fn parse_metrics(text: &str) -> Result<Vec<MetricsRecord>> {
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(Error::Invalid("unexpected metrics header".into()));
    }
    let rows: Vec<MetricsRecord> = lines.filter(|l| !l.is_empty()).map(MetricsRecord::from_csv_row).collect::<Result<_>>()?;
    if rows.windows(2).any(|w| w[1].step <= w[0].step) {
        return Err(Error::Invalid("metrics steps are not strictly increasing".into()));
    }
    Ok(rows)
}

/// In-memory inputs of a run.
#[derive(Clone, Debug, Default)]
pub struct TrainData {
    pub train_docs: Vec<Vec<Token>>,
    pub val_docs: Vec<Vec<Token>>,
    pub items: Vec<McItem>,
}

impl TrainData {
    pub fn load(cfg: &TrainConfig) -> Result<Self> {
        let train_path = cfg.train_path.as_ref().ok_or_else(|| Error::Config("train_path is required".into()))?;
        let mut items = match &cfg.cloze_path {
            Some(p) => load_items(p)?,
            None => Vec::new(),
        };
        if cfg.cloze_items > 0 {
            items.truncate(cfg.cloze_items);
        }
        Ok(TrainData {
            train_docs: load_documents(train_path)?,
            val_docs: match &cfg.val_path {
                Some(p) => load_documents(p)?,
                None => Vec::new(),
            },
            items,
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
struct TrainerState {
    step: u64,
    adam_t: u64,
    val_position: usize,
    loss_sum: f64,
    loss_count: u64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub run_dir: PathBuf,
    pub last_step: u64,
    pub total_steps: u64,
    pub completed: bool,
    pub metrics: Vec<MetricsRecord>,
    pub evals: Vec<NllRecord>,
    pub model: Model,
}

pub fn checkpoint_path(run_dir: &Path, step: u64) -> PathBuf {
    run_dir.join("checkpoints").join(format!("step_{step:08}.ckpt"))
}

/// Step of the newest checkpoint in `run_dir`, if any.
pub fn latest_checkpoint(run_dir: &Path) -> Option<(u64, PathBuf)> {
    let dir = fs::read_dir(run_dir.join("checkpoints")).ok()?;
    dir.filter_map(|e| {
        let p = e.ok()?.path();
        let step = p.file_name()?.to_str()?.strip_prefix("step_")?.strip_suffix(".ckpt")?.parse().ok()?;
        Some((step, p))
    })
    .max_by_key(|(s, _)| *s)
}

fn save_checkpoint(path: &Path, model: &Model, opt: &AdamW, state: &TrainerState) -> Result<()> {
    fs::create_dir_all(path.parent().expect("checkpoint in a directory"))?;
    let tmp = path.with_extension("tmp");
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        model.write_to(&mut w)?;
        write_blobs(&mut w, &opt.to_blobs())?;
        let s = serde_json::to_vec(state)?;
        w.write_all(&(s.len() as u32).to_le_bytes())?;
        w.write_all(&s)?;
        w.flush()?;
    }
    fs::rename(tmp, path)?;
    Ok(())
}

fn load_checkpoint(path: &Path, cfg: &TrainConfig) -> Result<(Model, AdamW, TrainerState)> {
    let mut r = BufReader::new(File::open(path)?);
    let model = Model::read_from(&mut r)?;
    if model.spec() != &cfg.model_spec() {
        return Err(Error::Config(format!("{} was written for a different model shape", path.display())));
    }
    let blobs = read_blobs(&mut r)?;
    let mut len = [0u8; 4];
    r.read_exact(&mut len)?;
    let mut s = vec![0u8; u32::from_le_bytes(len) as usize];
    r.read_exact(&mut s)?;
    let state: TrainerState = serde_json::from_slice(&s)?;
    let mut opt = AdamW::new(model.params(), cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay);
    opt.load_blobs(blobs, state.adam_t)?;
    Ok((model, opt, state))
}

/// Keeps the header and rows with `step <= upto`.
fn truncate_csv(path: &Path, upto: u64) -> Result<()> {
    let Ok(text) = fs::read_to_string(path) else {
        return Ok(());
    };
    let mut out = String::new();
    for (i, line) in text.lines().enumerate() {
        let keep = i == 0 || line.split(',').next().and_then(|s| s.parse::<u64>().ok()).is_some_and(|s| s <= upto);
        if keep {
            out.push_str(line);
            out.push('\n');
        }
    }
    fs::write(path, out)?;
    Ok(())
}

fn append_line(path: &Path, header: &str, line: &str) -> Result<()> {
    let fresh = !path.exists();
    let mut f = fs::OpenOptions::new().create(true).append(true).open(path)?;
    if fresh {
        writeln!(f, "{header}")?;
    }
    writeln!(f, "{line}")?;
    Ok(())
}

/// Loss graph for one batch; returns the parameter gradients and the loss.
fn step_gradients(model: &Model, cfg: &TrainConfig, tokens: &[Token], batch: usize, rng: &mut Rng) -> Result<(f64, Vec<Vec<f32>>)> {
    let dropout_on = model.spec().dropout_prob > 0.0;
    let mut g = Graph::new();
    let params = model.bind(&mut g, true);
    let (loss, report) = match cfg.objective {
        ObjectiveKind::Ar => ar_loss_graph(&mut g, &params, model, tokens, batch, dropout_on.then_some(rng))?,
        ObjectiveKind::ArInputNoise => {
            let opts = InputNoiseOptions {
                mask_ratio: cfg.mask_ratio,
                exclude_masked_targets: cfg.exclude_masked_targets,
            };
            ar_loss_with_input_noise_graph(&mut g, &params, model, tokens, batch, opts, dropout_on, rng)?
        }
        ObjectiveKind::Mdm => {
            let opts = MdmLossOptions {
                schedule: cfg.schedule.clone(),
                n_mc: cfg.n_mc,
                normalize: cfg.normalize,
                time_sampling: cfg.time_sampling(),
                ensure_masked: cfg.ensure_masked,
                keep_breakdown: false,
            };
            mdm_loss_graph(&mut g, &params, model, tokens, batch, &opts, dropout_on, rng)?
        }
    };
    if !report.loss.is_finite() {
        return Ok((report.loss, Vec::new()));
    }
    let mut grads = g.backward(loss)?;
    let out = params.iter().zip(model.params()).map(|(&v, p)| grads.take(v).unwrap_or_else(|| vec![0.0; p.numel()])).collect();
    Ok((report.loss, out))
}

/// Trains from the files named in `cfg`; see [`train_with`].
pub fn train(cfg: &TrainConfig, run_dir: &Path, resume: bool) -> Result<TrainOutcome> {
    let data = TrainData::load(cfg)?;
    train_with(cfg, &data, run_dir, resume)
}

/// The optimization loop. Batch `k` (1-based) is the stream's batch
/// `k - 1`; its corruption and dropout draws come from stream `k` of the
/// run seed, so resuming from a checkpoint continues bit-identically.
/// Writes `metrics.csv`, `eval.csv` and `checkpoints/` under `run_dir`.
pub fn train_with(cfg: &TrainConfig, data: &TrainData, run_dir: &Path, resume: bool) -> Result<TrainOutcome> {
    cfg.validate()?;
    fs::create_dir_all(run_dir)?;
    let corpus = BudgetedCorpus {
        unique_tokens: cfg.unique_tokens,
        total_tokens: cfg.total_tokens,
        seq_len: cfg.model.seq_len,
        seed: cfg.seed,
        sources: cfg.train_path.iter().cloned().collect(),
        tier: cfg.tier.clone(),
    };
    let stream: BatchStream = corpus.build_stream_from(&data.train_docs, cfg.batch_size)?;
    let total = if cfg.total_steps == 0 { stream.n_steps() } else { cfg.total_steps };
    if total == 0 || total > stream.n_steps() {
        return Err(Error::Config(format!("{total} steps requested, the token budget provides {}", stream.n_steps())));
    }
    let wsd = Wsd::new(cfg.peak_lr, cfg.final_lr, cfg.warmup_steps, cfg.decay_fraction, total)?;
    let mut val = if data.val_docs.is_empty() {
        None
    } else {
        Some(ValidationCursor::from_documents(&data.val_docs, cfg.model.seq_len, cfg.val_windows.max(1), cfg.rotate_val)?)
    };
    let scoring = ScoringConfig {
        t_grid: cfg.scoring_t_grid.clone(),
        draws_per_t: cfg.scoring_draws,
        seed: cfg.eval_seed,
    };
    let metrics_path = run_dir.join("metrics.csv");
    let eval_path = run_dir.join("eval.csv");

    let resumed = if resume { latest_checkpoint(run_dir) } else { None };
    let (mut model, mut opt, mut state) = match resumed {
        Some((step, path)) => {
            log::info!("resuming {} from step {step}", cfg.name);
            truncate_csv(&metrics_path, step)?;
            truncate_csv(&eval_path, step)?;
            load_checkpoint(&path, cfg)?
        }
        None => {
            for p in [&metrics_path, &eval_path] {
                if p.exists() {
                    fs::remove_file(p)?;
                }
            }
            if run_dir.join("checkpoints").exists() {
                fs::remove_dir_all(run_dir.join("checkpoints"))?;
            }
            let model = Model::init(cfg.model_spec(), cfg.seed)?;
            let opt = AdamW::new(model.params(), cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay);
            (model, opt, TrainerState::default())
        }
    };
    if let Some(v) = val.as_mut() {
        v.set_position(state.val_position);
    }

    if !data.items.is_empty() && !data.items.iter().any(|it| it.fits(cfg.model.seq_len)) {
        return Err(Error::Config(format!("no evaluation item fits seq_len {}", cfg.model.seq_len)));
    }

    let stop = if cfg.stop_after > 0 { cfg.stop_after.min(total) } else { total };
    while state.step < stop {
        let step = state.step + 1;
        let batch = stream.batch(step - 1)?;
        let mut rng = Rng::stream(cfg.seed, step);
        let (loss, mut grads) = step_gradients(&model, cfg, &batch.tokens, batch.batch_size, &mut rng)?;
        if !loss.is_finite() {
            log::error!("{}: loss {loss} at step {step}; keeping the last checkpoint", cfg.name);
            return Err(Error::NonFinite { step, loss });
        }
        clip_grad_norm(&mut grads, cfg.grad_clip);
        let lr = wsd.lr_at(step)?;
        opt.step(model.params_mut(), &grads, lr);
        if model.params().iter().any(|p| p.data().iter().any(|x| !x.is_finite())) {
            log::error!("{}: parameters diverged at step {step}; keeping the last checkpoint", cfg.name);
            return Err(Error::NonFinite { step, loss: f64::NAN });
        }
        state.step = step;
        state.adam_t = opt.t;
        state.loss_sum += loss;
        state.loss_count += 1;

        if step % cfg.eval_every == 0 || step == total {
            let val_ce = match val.as_mut() {
                Some(v) => Some(validation_ce(&model, cfg.objective, &v.next_chunk(), cfg.eval_seed, 8)?),
                None => None,
            };
            state.val_position = val.as_ref().map_or(0, |v| v.position());
            let mc = if data.items.is_empty() {
                None
            } else {
                Some(mc_accuracy(&model, &data.items, cfg.objective, &scoring)?)
            };
            let tokens_seen = stream.tokens_after(step);
            let rec = MetricsRecord {
                step,
                epoch: stream.epochs_after(step),
                train_loss: state.loss_sum / state.loss_count as f64,
                lr,
                val_ce,
                mc_accuracy: mc.as_ref().map(|m| m.accuracy),
                delta_nll: mc.as_ref().map(|m| m.delta()),
                tokens_seen,
                flops_estimate: train_flops(model.spec(), tokens_seen as f64)?.total,
            };
            state.loss_sum = 0.0;
            state.loss_count = 0;
            log::info!("{} step {step}/{total} loss {:.4} val {:?} acc {:?}", cfg.name, rec.train_loss, rec.val_ce, rec.mc_accuracy);
            append_line(&metrics_path, METRICS_HEADER, &rec.to_csv_row())?;
            if let Some(m) = &mc {
                let r = NllRecord::new(step, m, val_ce.unwrap_or(f64::NAN));
                let mut row = Vec::new();
                eval::write_eval_csv(&mut row, &[r])?;
                let row = String::from_utf8_lossy(&row);
                append_line(&eval_path, eval::EVAL_CSV_HEADER, row.lines().nth(1).unwrap_or_default())?;
            }
        }
        if (cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0) || step == total || step == stop {
            save_checkpoint(&checkpoint_path(run_dir, step), &model, &opt, &state)?;
        }
    }

    let metrics = if metrics_path.exists() { read_metrics(&metrics_path)? } else { Vec::new() };
    let evals = match fs::read_to_string(&eval_path) {
        Ok(t) => eval::read_eval_csv(&t)?,
        Err(_) => Vec::new(),
    };
    Ok(TrainOutcome {
        run_dir: run_dir.to_path_buf(),
        last_step: state.step,
        total_steps: total,
        completed: state.step == total,
        metrics,
        evals,
        model,
    })
}
