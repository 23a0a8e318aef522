//! Training losses: next-token cross-entropy, the masked-diffusion Monte
//! Carlo bound, and next-token loss on randomly masked inputs.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::schedule::{corrupt, enumerate_mask_patterns, NoiseSchedule, TimeSampling};
use crate::tensor::{Graph, Rng, Scalar, Var};
use crate::transformer::{AttentionMode, Model};
use crate::Token;

const IGNORE: usize = usize::MAX;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossReport {
    pub loss: f64,
    /// Predictions contributing to the loss.
    pub token_count: usize,
    /// Per-draw contribution (sequence-level loss of every row), when
    /// requested.
    pub breakdown: Option<Vec<f64>>,
    pub mc_samples: usize,
    pub t_values: Vec<f64>,
}

/// Which objective a run trains.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ObjectiveKind {
    Ar,
    Mdm,
    ArInputNoise,
}

impl ObjectiveKind {
    pub fn attention_mode(self) -> AttentionMode {
        match self {
            ObjectiveKind::Mdm => AttentionMode::Bidirectional,
            _ => AttentionMode::Causal,
        }
    }

    pub fn is_diffusion(self) -> bool {
        self == ObjectiveKind::Mdm
    }
}

impl fmt::Display for ObjectiveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ObjectiveKind::Ar => "ar",
            ObjectiveKind::Mdm => "mdm",
            ObjectiveKind::ArInputNoise => "ar+input_noise",
        })
    }
}

impl FromStr for ObjectiveKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ar" => Ok(ObjectiveKind::Ar),
            "mdm" | "dlm" => Ok(ObjectiveKind::Mdm),
            "ar+input_noise" => Ok(ObjectiveKind::ArInputNoise),
            _ => Err(Error::Config(format!("unknown objective {s:?}"))),
        }
    }
}

/// Normalization of the diffusion loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Normalize {
    /// Weighted masked NLL divided by sequence length.
    #[default]
    Seq,
    /// Plain (unweighted) mean NLL over masked positions.
    Masked,
}

impl FromStr for Normalize {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "seq" => Ok(Normalize::Seq),
            "masked" => Ok(Normalize::Masked),
            _ => Err(Error::Config(format!("unknown normalization {s:?}"))),
        }
    }
}

impl fmt::Display for Normalize {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Normalize::Seq => "seq",
            Normalize::Masked => "masked",
        })
    }
}

#[derive(Clone, Debug)]
pub struct MdmLossOptions {
    pub schedule: NoiseSchedule,
    pub n_mc: usize,
    pub normalize: Normalize,
    pub time_sampling: TimeSampling,
    /// Mask one position when a draw masks nothing. Keeps every training
    /// draw informative; biases the estimator slightly for short sequences.
    pub ensure_masked: bool,
    pub keep_breakdown: bool,
}

impl Default for MdmLossOptions {
    fn default() -> Self {
        MdmLossOptions {
            schedule: NoiseSchedule::Linear,
            n_mc: 1,
            normalize: Normalize::Seq,
            time_sampling: TimeSampling::default(),
            ensure_masked: true,
            keep_breakdown: false,
        }
    }
}

fn rows(tokens: &[Token], batch: usize) -> Result<usize> {
    if batch == 0 || tokens.is_empty() || tokens.len() % batch != 0 {
        return Err(Error::Invalid(format!("{} tokens do not form {batch} rows", tokens.len())));
    }
    Ok(tokens.len() / batch)
}

fn per_row_totals<T: Scalar>(g: &Graph<'_, T>, logits: Var, targets: &[usize], weights: &[f64], len: usize) -> Vec<f64> {
    let k = g.shape(logits)[1];
    let data = g.value(logits).data();
    let mut out = vec![0.0; targets.len() / len];
    for (i, &t) in targets.iter().enumerate() {
        if t != IGNORE {
            let row: Vec<f64> = data[i * k..(i + 1) * k].iter().map(|x| x.as_f64()).collect();
            let lse = crate::tensor::kernels::log_sum_exp(&row);
            out[i / len] += weights[i] * (lse - row[t]);
        }
    }
    out
}

/// Next-token loss on the graph. `input_mask` optionally replaces inputs
/// (not targets) with the mask symbol; `exclude_masked_targets` drops
/// predictions whose target token was masked in the input.
fn ar_graph<'a, T: Scalar>(
    g: &mut Graph<'a, T>,
    params: &[Var],
    model: &'a Model<T>,
    tokens: &[Token],
    batch: usize,
    input_mask: Option<&[bool]>,
    exclude_masked_targets: bool,
    dropout: Option<&mut Rng>,
) -> Result<(Var, LossReport)> {
    model.require_mode(AttentionMode::Causal)?;
    let len = rows(tokens, batch)?;
    let mut inputs = tokens.to_vec();
    if let Some(m) = input_mask {
        for (x, &masked) in inputs.iter_mut().zip(m) {
            if masked {
                *x = model.spec().mask_token;
            }
        }
    }
    let targets: Vec<usize> = (0..tokens.len())
        .map(|i| {
            let next = i + 1;
            if next % len == 0 || (exclude_masked_targets && input_mask.is_some_and(|m| m[next])) {
                IGNORE
            } else {
                tokens[next] as usize
            }
        })
        .collect();
    let logits = model.forward_graph(g, params, &inputs, batch, AttentionMode::Causal, dropout)?;
    let (loss, count) = g.softmax_cross_entropy(logits, &targets, IGNORE)?;
    Ok((
        loss,
        LossReport {
            loss: g.value(loss).item().as_f64(),
            token_count: count,
            breakdown: None,
            mc_samples: 1,
            t_values: Vec::new(),
        },
    ))
}

/// Mean next-token NLL over all `batch × (len-1)` predictions, as a graph
/// node for training.
pub fn ar_loss_graph<'a, T: Scalar>(
    g: &mut Graph<'a, T>,
    params: &[Var],
    model: &'a Model<T>,
    tokens: &[Token],
    batch: usize,
    dropout: Option<&mut Rng>,
) -> Result<(Var, LossReport)> {
    ar_graph(g, params, model, tokens, batch, None, false, dropout)
}

pub fn ar_loss<T: Scalar>(model: &Model<T>, tokens: &[Token], batch: usize, dropout_on: bool, rng: &mut Rng) -> Result<LossReport> {
    let mut g = Graph::new();
    let params = model.bind(&mut g, false);
    Ok(ar_loss_graph(&mut g, &params, model, tokens, batch, dropout_on.then_some(rng))?.1)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct InputNoiseOptions {
    pub mask_ratio: f64,
    pub exclude_masked_targets: bool,
}

/// Positions to replace by the mask symbol: each independently with
/// probability `ratio`.
pub fn input_noise_mask(n: usize, ratio: f64, rng: &mut Rng) -> Vec<bool> {
    (0..n).map(|_| rng.bernoulli(ratio)).collect()
}

/// Next-token loss where every input position is independently replaced by
/// the mask symbol with probability `mask_ratio`. Masking draws come from
/// `rng` first; dropout (if any) follows on the same generator.
pub fn ar_loss_with_input_noise_graph<'a, T: Scalar>(
    g: &mut Graph<'a, T>,
    params: &[Var],
    model: &'a Model<T>,
    tokens: &[Token],
    batch: usize,
    opts: InputNoiseOptions,
    dropout_on: bool,
    rng: &mut Rng,
) -> Result<(Var, LossReport)> {
    if !(0.0..1.0).contains(&opts.mask_ratio) {
        return Err(Error::Invalid(format!("mask_ratio {} outside [0, 1)", opts.mask_ratio)));
    }
    let mask = (opts.mask_ratio > 0.0).then(|| input_noise_mask(tokens.len(), opts.mask_ratio, rng));
    ar_graph(g, params, model, tokens, batch, mask.as_deref(), opts.exclude_masked_targets, dropout_on.then_some(rng))
}

pub fn ar_loss_with_input_noise<T: Scalar>(
    model: &Model<T>,
    tokens: &[Token],
    batch: usize,
    opts: InputNoiseOptions,
    dropout_on: bool,
    rng: &mut Rng,
) -> Result<LossReport> {
    let mut g = Graph::new();
    let params = model.bind(&mut g, false);
    Ok(ar_loss_with_input_noise_graph(&mut g, &params, model, tokens, batch, opts, dropout_on, rng)?.1)
}

/// Diffusion bound on the graph. Each of the `batch` sequences is
/// corrupted `n_mc` times with its own noise level; the loss averages the
/// weighted masked NLL over draws and batch and divides by `len`.
pub fn mdm_loss_graph<'a, T: Scalar>(
    g: &mut Graph<'a, T>,
    params: &[Var],
    model: &'a Model<T>,
    tokens: &[Token],
    batch: usize,
    opts: &MdmLossOptions,
    dropout_on: bool,
    rng: &mut Rng,
) -> Result<(Var, LossReport)> {
    model.require_mode(AttentionMode::Bidirectional)?;
    if opts.n_mc == 0 {
        return Err(Error::Invalid("n_mc must be at least 1".into()));
    }
    let len = rows(tokens, batch)?;
    let mask = model.spec().mask_token;
    let draws = batch * opts.n_mc;
    let mut inputs = Vec::with_capacity(draws * len);
    let mut targets = vec![IGNORE; draws * len];
    let mut weights = vec![0.0; draws * len];
    let mut t_values = Vec::with_capacity(draws);
    let mut masked_total = 0usize;
    let mut draw_weight = Vec::with_capacity(draws);
    for b in 0..batch {
        let x0 = &tokens[b * len..(b + 1) * len];
        for _ in 0..opts.n_mc {
            let (t, w) = opts.time_sampling.sample(&opts.schedule, rng)?;
            let mut s = corrupt(x0, t, &opts.schedule, mask, rng)?;
            if opts.ensure_masked {
                s.ensure_masked(mask, rng);
            }
            let row = inputs.len();
            for &i in &s.masked_positions {
                targets[row + i] = x0[i] as usize;
            }
            masked_total += s.masked_positions.len();
            draw_weight.push((row, s.masked_positions, w));
            inputs.extend_from_slice(&s.xt);
            t_values.push(t);
        }
    }
    for (row, positions, w) in &draw_weight {
        let c = match opts.normalize {
            Normalize::Seq => w / (draws * len) as f64,
            Normalize::Masked => 1.0 / masked_total.max(1) as f64,
        };
        for &i in positions {
            weights[row + i] = c;
        }
    }
    let logits = model.forward_graph(g, params, &inputs, draws, AttentionMode::Bidirectional, dropout_on.then_some(rng))?;
    let loss = g.weighted_nll(logits, &targets, IGNORE, &weights)?;
    let breakdown = opts.keep_breakdown.then(|| {
        let mut per = per_row_totals(g, logits, &targets, &weights, len);
        // rescale to the per-draw estimate of the normalized loss
        let scale = match opts.normalize {
            Normalize::Seq => draws as f64,
            Normalize::Masked => masked_total.max(1) as f64,
        };
        per.iter_mut().for_each(|x| *x *= scale);
        per
    });
    Ok((
        loss,
        LossReport {
            loss: g.value(loss).item().as_f64(),
            token_count: masked_total,
            breakdown,
            mc_samples: opts.n_mc,
            t_values,
        },
    ))
}

pub fn mdm_loss<T: Scalar>(model: &Model<T>, tokens: &[Token], batch: usize, opts: &MdmLossOptions, dropout_on: bool, rng: &mut Rng) -> Result<LossReport> {
    let mut g = Graph::new();
    let params = model.bind(&mut g, false);
    Ok(mdm_loss_graph(&mut g, &params, model, tokens, batch, opts, dropout_on, rng)?.1)
}

/// Number of distinct corrupted inputs the diffusion objective can present
/// for `x0` (one per mask pattern).
pub fn distinct_mdm_inputs(x0: &[Token], mask: Token) -> Result<usize> {
    let mut seen = HashSet::new();
    for p in enumerate_mask_patterns(x0.len())? {
        let mut xt = x0.to_vec();
        p.iter().for_each(|&i| xt[i] = mask);
        seen.insert(xt);
    }
    Ok(seen.len())
}

/// Number of distinct prediction contexts next-token training presents for
/// `x0`: the empty prefix up to the prefix of length `L-1`.
pub fn distinct_ar_contexts(x0: &[Token]) -> usize {
    (0..x0.len()).map(|i| &x0[..i]).collect::<HashSet<_>>().len()
}
