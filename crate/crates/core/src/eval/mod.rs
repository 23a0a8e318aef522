//! Validation cross-entropy, completion-style multiple-choice scoring with
//! per-character normalization, and the ΔNLL diagnostic series.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{tokenize, BOS};
use crate::error::{Error, Result};
use crate::objectives::{ar_loss, mdm_loss, MdmLossOptions, ObjectiveKind};
use crate::schedule::{corrupt, NoiseSchedule};
use crate::tensor::{kernels::log_sum_exp, Rng, Scalar};
use crate::transformer::{Model, ModelError};
use crate::Token;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct McItem {
    pub context: String,
    pub options: Vec<String>,
    #[serde(rename = "answer")]
    pub answer_index: usize,
}

impl McItem {
    pub fn validate(&self) -> Result<()> {
        if self.options.len() < 2 || self.answer_index >= self.options.len() {
            return Err(Error::Invalid(format!(
                "item needs >= 2 options and a valid answer (got {} options, answer {})",
                self.options.len(),
                self.answer_index
            )));
        }
        Ok(())
    }
}

/// One JSON object per line; blank lines ignored.
pub fn load_items(path: &Path) -> Result<Vec<McItem>> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut items = Vec::new();
    for (n, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let item: McItem = serde_json::from_str(&line).map_err(|e| Error::Config(format!("{}:{}: {e}", path.display(), n + 1)))?;
        item.validate()?;
        items.push(item);
    }
    Ok(items)
}

pub fn write_items(path: &Path, items: &[McItem]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for it in items {
        serde_json::to_writer(&mut f, it)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

/// How diffusion models score an option: the masked-NLL bound over option
/// positions at a fixed set of noise levels, several mask draws each.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoringConfig {
    pub t_grid: Vec<f64>,
    pub draws_per_t: usize,
    pub seed: u64,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        ScoringConfig {
            t_grid: vec![0.25, 0.5, 0.75],
            draws_per_t: 4,
            seed: 0x5C0E,
        }
    }
}

fn encode(context: &str, option: &str) -> (Vec<Token>, usize) {
    let mut seq = vec![BOS];
    seq.extend(tokenize(context.as_bytes()));
    let start = seq.len();
    seq.extend(tokenize(option.as_bytes()));
    (seq, start)
}

impl McItem {
    /// Whether every option, with its context and a leading BOS, fits in
    /// `seq_len` positions.
    pub fn fits(&self, seq_len: usize) -> bool {
        self.options.iter().all(|o| encode(&self.context, o).0.len() <= seq_len)
    }
}

/// Character count used to normalize option NLLs.
pub fn char_count(option: &str) -> usize {
    option.chars().count()
}

/// NLL of `option` after `context`, divided by the option's character
/// count. Causal models use the exact chain-rule likelihood; diffusion
/// models the fixed-grid masked bound with context positions never masked.
/// `item_id` selects the mask draws, so options of one item share them.
pub fn option_nll<T: Scalar>(model: &Model<T>, kind: ObjectiveKind, context: &str, option: &str, cfg: &ScoringConfig, item_id: u64) -> Result<f64> {
    let chars = char_count(option);
    if chars == 0 {
        return Err(Error::Invalid("empty option".into()));
    }
    let (seq, start) = encode(context, option);
    let cap = model.spec().seq_len;
    if seq.len() > cap {
        return Err(ModelError::ContextOverflow { len: seq.len(), capacity: cap }.into());
    }
    let k = model.spec().vocab_size;
    let total = if kind.is_diffusion() {
        let schedule = NoiseSchedule::Linear;
        let mask = model.spec().mask_token;
        let draws = cfg.t_grid.len() * cfg.draws_per_t;
        if draws == 0 {
            return Err(Error::Invalid("empty scoring grid".into()));
        }
        let mut rng = Rng::stream(cfg.seed, item_id);
        let mut inputs = Vec::with_capacity(draws * seq.len());
        let mut jobs = Vec::with_capacity(draws);
        for &t in &cfg.t_grid {
            for _ in 0..cfg.draws_per_t {
                let mut s = corrupt(&seq[start..], t, &schedule, mask, &mut rng)?;
                s.ensure_masked(mask, &mut rng);
                let mut row = seq[..start].to_vec();
                row.extend(&s.xt);
                inputs.extend(row);
                jobs.push((schedule.loss_weight(t)?, s.masked_positions));
            }
        }
        let logits = model.logits(&inputs, draws)?;
        let data = logits.data();
        let mut acc = 0.0;
        for (d, (w, positions)) in jobs.iter().enumerate() {
            for &p in positions {
                let r = d * seq.len() + start + p;
                let row: Vec<f64> = data[r * k..(r + 1) * k].iter().map(|x| x.as_f64()).collect();
                acc += w * (log_sum_exp(&row) - row[seq[start + p] as usize]);
            }
        }
        acc / draws as f64
    } else {
        let logits = model.logits(&seq, 1)?;
        let data = logits.data();
        (start..seq.len())
            .map(|i| {
                let row: Vec<f64> = data[(i - 1) * k..i * k].iter().map(|x| x.as_f64()).collect();
                log_sum_exp(&row) - row[seq[i] as usize]
            })
            .sum()
    };
    Ok(total / chars as f64)
}

/// Index of the smallest NLL; the lowest index wins ties.
pub fn select_answer(nlls: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in nlls.iter().enumerate() {
        if v < nlls[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq)]
pub struct ItemScore {
    pub nlls: Vec<f64>,
    pub chosen: usize,
    pub answer: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct McResult {
    pub accuracy: f64,
    /// Mean char-normalized NLL of the correct options.
    pub nll_truth: f64,
    /// Mean over items of the mean NLL of the incorrect options.
    pub nll_others: f64,
    pub scored: usize,
    pub skipped: usize,
    pub items: Vec<ItemScore>,
}

impl McResult {
    pub fn delta(&self) -> f64 {
        self.nll_others - self.nll_truth
    }

    pub fn from_scores(items: Vec<ItemScore>, skipped: usize) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::Invalid("no item could be scored".into()));
        }
        let n = items.len() as f64;
        let correct = items.iter().filter(|s| s.chosen == s.answer).count() as f64;
        let nll_truth = items.iter().map(|s| s.nlls[s.answer]).sum::<f64>() / n;
        let nll_others = items
            .iter()
            .map(|s| {
                let others: Vec<f64> = s.nlls.iter().enumerate().filter(|&(i, _)| i != s.answer).map(|(_, &v)| v).collect();
                others.iter().sum::<f64>() / others.len() as f64
            })
            .sum::<f64>()
            / n;
        Ok(McResult {
            accuracy: correct / n,
            nll_truth,
            nll_others,
            scored: items.len(),
            skipped,
            items,
        })
    }
}

/// Scores every item; items that do not fit the context are skipped and
/// counted.
pub fn mc_accuracy<T: Scalar>(model: &Model<T>, items: &[McItem], kind: ObjectiveKind, cfg: &ScoringConfig) -> Result<McResult> {
    if items.is_empty() {
        return Err(Error::Invalid("no items".into()));
    }
    let mut scores = Vec::with_capacity(items.len());
    let mut skipped = 0;
    'items: for (id, item) in items.iter().enumerate() {
        item.validate()?;
        let mut nlls = Vec::with_capacity(item.options.len());
        for opt in &item.options {
            match option_nll(model, kind, &item.context, opt, cfg, id as u64) {
                Ok(v) => nlls.push(v),
                Err(Error::Model(ModelError::ContextOverflow { .. })) => {
                    skipped += 1;
                    continue 'items;
                }
                Err(e) => return Err(e),
            }
        }
        scores.push(ItemScore {
            chosen: select_answer(&nlls),
            answer: item.answer_index,
            nlls,
        });
    }
    if skipped > 0 {
        log::warn!("{skipped} items skipped: context overflow");
    }
    McResult::from_scores(scores, skipped)
}

/// Held-out cross-entropy in nats per token: the next-token loss for
/// causal models, the masked bound with a fixed seed for diffusion models.
/// The two are not comparable with each other.
pub fn validation_ce<T: Scalar>(model: &Model<T>, kind: ObjectiveKind, windows: &[Vec<Token>], eval_seed: u64, batch: usize) -> Result<f64> {
    if windows.is_empty() {
        return Err(Error::Invalid("empty validation stream".into()));
    }
    let opts = MdmLossOptions {
        ensure_masked: false,
        ..Default::default()
    };
    let mut rng = Rng::new(eval_seed);
    let (mut total, mut weight) = (0.0, 0.0);
    for chunk in windows.chunks(batch.max(1)) {
        let flat: Vec<Token> = chunk.iter().flatten().copied().collect();
        let r = if kind.is_diffusion() {
            let r = mdm_loss(model, &flat, chunk.len(), &opts, false, &mut rng)?;
            (r.loss, chunk.len() as f64)
        } else {
            let r = ar_loss(model, &flat, chunk.len(), false, &mut rng)?;
            (r.loss, r.token_count as f64)
        };
        total += r.0 * r.1;
        weight += r.1;
    }
    Ok(if weight > 0.0 { total / weight } else { 0.0 })
}

/// Per-checkpoint diagnostic row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NllRecord {
    pub step: u64,
    pub nll_truth: f64,
    pub nll_others: f64,
    pub delta: f64,
    pub val_ce: f64,
    pub accuracy: f64,
}

impl NllRecord {
    pub fn new(step: u64, mc: &McResult, val_ce: f64) -> Self {
        NllRecord {
            step,
            nll_truth: mc.nll_truth,
            nll_others: mc.nll_others,
            delta: mc.delta(),
            val_ce,
            accuracy: mc.accuracy,
        }
    }
}

pub const EVAL_CSV_HEADER: &str = "step,nll_truth,nll_others,delta,val_ce,accuracy";

/// Sorted by step, with `delta` recomputed from its parts.
pub fn delta_nll_series(records: &[NllRecord]) -> Result<Vec<NllRecord>> {
    if records.len() < 2 {
        return Err(Error::Invalid("the series needs at least two checkpoints".into()));
    }
    let mut out = records.to_vec();
    out.sort_by_key(|r| r.step);
    for r in &mut out {
        r.delta = r.nll_others - r.nll_truth;
        if !r.delta.is_finite() {
            return Err(Error::Invalid(format!("non-finite delta at step {}", r.step)));
        }
    }
    Ok(out)
}

/// Consecutive checkpoint pairs where validation CE rises while the
/// option gap does not shrink.
pub fn decoupling_intervals(series: &[NllRecord]) -> Vec<(u64, u64)> {
    series
        .windows(2)
        .filter(|w| w[1].val_ce > w[0].val_ce && w[1].delta >= w[0].delta)
        .map(|w| (w[0].step, w[1].step))
        .collect()
}

pub fn write_eval_csv(w: &mut impl Write, records: &[NllRecord]) -> Result<()> {
    writeln!(w, "{EVAL_CSV_HEADER}")?;
    for r in records {
        writeln!(w, "{},{},{},{},{},{}", r.step, r.nll_truth, r.nll_others, r.delta, r.val_ce, r.accuracy)?;
    }
    Ok(())
}

pub fn read_eval_csv(text: &str) -> Result<Vec<NllRecord>> {
    let mut lines = text.lines();
    if lines.next() != Some(EVAL_CSV_HEADER) {
        return Err(Error::Invalid("unexpected eval CSV header".into()));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            let num = |i: usize| -> Result<f64> { f.get(i).and_then(|s| s.parse().ok()).ok_or_else(|| Error::Invalid(format!("bad eval row {l:?}"))) };
            Ok(NllRecord {
                step: num(0)? as u64,
                nll_truth: num(1)?,
                nll_others: num(2)?,
                delta: num(3)?,
                val_ce: num(4)?,
                accuracy: num(5)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests;
