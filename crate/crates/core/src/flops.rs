//! Analytic FLOP counts for training and generation. A multiply-add is two
//! FLOPs; embedding lookups are free; the output projection is counted;
//! norms, softmax and elementwise ops are ignored.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::transformer::ModelSpec;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct Breakdown {
    /// Q, K, V and output projections.
    pub projections: f64,
    pub attention_qk: f64,
    pub attention_av: f64,
    pub ffn: f64,
    pub logits: f64,
    pub embedding: f64,
}

impl Breakdown {
    pub fn sum(&self) -> f64 {
        self.projections + self.attention_qk + self.attention_av + self.ffn + self.logits + self.embedding
    }

    fn scaled(self, c: f64) -> Self {
        Breakdown {
            projections: self.projections * c,
            attention_qk: self.attention_qk * c,
            attention_av: self.attention_av * c,
            ffn: self.ffn * c,
            logits: self.logits * c,
            embedding: self.embedding * c,
        }
    }

    fn add(self, o: Self) -> Self {
        Breakdown {
            projections: self.projections + o.projections,
            attention_qk: self.attention_qk + o.attention_qk,
            attention_av: self.attention_av + o.attention_av,
            ffn: self.ffn + o.ffn,
            logits: self.logits + o.logits,
            embedding: self.embedding + o.embedding,
        }
    }
}

/// Inputs the report was computed from, echoed verbatim.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct Assumptions {
    pub kind: String,
    pub d_model: usize,
    pub n_layers: usize,
    pub ffn_hidden: usize,
    pub vocab_size: usize,
    pub seq_len: usize,
    pub prompt_len: Option<usize>,
    pub gen_len: Option<usize>,
    pub steps: Option<usize>,
    pub use_cache: Option<bool>,
    pub tokens_processed: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FlopsReport {
    pub total: f64,
    pub breakdown: Breakdown,
    /// Total divided by the number of tokens produced or processed.
    pub per_token: f64,
    /// Total divided by the number of forward passes (sampling steps for
    /// diffusion, generated tokens for decoding, optimizer steps are not
    /// modelled for training so this equals per-sequence cost there).
    pub per_step: f64,
    pub assumptions: Assumptions,
}

impl FlopsReport {
    fn new(breakdown: Breakdown, tokens: f64, steps: f64, assumptions: Assumptions) -> Self {
        let total = breakdown.sum();
        FlopsReport {
            total,
            breakdown,
            per_token: if tokens > 0.0 { total / tokens } else { 0.0 },
            per_step: if steps > 0.0 { total / steps } else { 0.0 },
            assumptions,
        }
    }
}

fn echo(spec: &ModelSpec, kind: &str, seq_len: usize) -> Assumptions {
    Assumptions {
        kind: kind.into(),
        d_model: spec.d_model,
        n_layers: spec.n_layers,
        ffn_hidden: spec.ffn_hidden(),
        vocab_size: spec.vocab_size,
        seq_len,
        ..Default::default()
    }
}

/// Position-independent cost of pushing `n` tokens through the network.
fn linear_terms(spec: &ModelSpec, n: f64) -> Breakdown {
    let (d, l) = (spec.d_model as f64, spec.n_layers as f64);
    Breakdown {
        projections: l * 8.0 * n * d * d,
        ffn: l * 6.0 * n * d * spec.ffn_hidden() as f64,
        logits: 2.0 * n * d * spec.vocab_size as f64,
        ..Default::default()
    }
}

/// Attention cost for `pairs` query-key pairs (scores and value mixing).
fn attention_terms(spec: &ModelSpec, pairs: f64) -> Breakdown {
    let c = spec.n_layers as f64 * 2.0 * pairs * spec.d_model as f64;
    Breakdown {
        attention_qk: c,
        attention_av: c,
        ..Default::default()
    }
}

/// One forward over `n` positions, every query seeing every key.
pub fn dense_forward(spec: &ModelSpec, n: usize) -> Breakdown {
    let n = n as f64;
    linear_terms(spec, n).add(attention_terms(spec, n * n))
}

/// One causal forward over `n` positions (query `i` sees `i + 1` keys);
/// equal to feeding the positions one by one through a KV cache.
pub fn causal_forward(spec: &ModelSpec, n: usize) -> Breakdown {
    let n = n as f64;
    linear_terms(spec, n).add(attention_terms(spec, n * (n + 1.0) / 2.0))
}

/// Forward plus backward (3× forward) over `tokens_processed` tokens packed
/// in `seq_len` windows. Both paradigms are charged dense attention, so
/// their per-token cost is identical.
pub fn train_flops(spec: &ModelSpec, tokens_processed: f64) -> Result<FlopsReport> {
    if !(tokens_processed > 0.0) {
        return Err(Error::Invalid("tokens_processed must be positive".into()));
    }
    let per_window = dense_forward(spec, spec.seq_len).scaled(3.0);
    let windows = tokens_processed / spec.seq_len as f64;
    let mut a = echo(spec, "train", spec.seq_len);
    a.tokens_processed = Some(tokens_processed);
    Ok(FlopsReport::new(per_window.scaled(windows), tokens_processed, windows, a))
}

/// Left-to-right generation of `gen_len` tokens after `prompt_len`. With a
/// cache every position is processed once; without, each new token re-runs
/// the whole prefix.
pub fn infer_flops_ar(spec: &ModelSpec, prompt_len: usize, gen_len: usize, use_cache: bool) -> Result<FlopsReport> {
    let n = prompt_len + gen_len;
    if n > spec.seq_len {
        return Err(Error::Invalid(format!("{n} positions exceed context {}", spec.seq_len)));
    }
    if n == 0 {
        return Err(Error::Invalid("nothing to process".into()));
    }
    let b = if use_cache || gen_len == 0 {
        causal_forward(spec, n)
    } else {
        (1..=gen_len).fold(Breakdown::default(), |acc, j| acc.add(causal_forward(spec, prompt_len + j)))
    };
    let mut a = echo(spec, "ar", spec.seq_len);
    a.prompt_len = Some(prompt_len);
    a.gen_len = Some(gen_len);
    a.use_cache = Some(use_cache);
    Ok(FlopsReport::new(b, gen_len.max(1) as f64, if use_cache { n } else { gen_len.max(1) } as f64, a))
}

/// `steps` bidirectional forwards over `seq_len` positions.
pub fn infer_flops_mdm(spec: &ModelSpec, seq_len: usize, steps: usize) -> Result<FlopsReport> {
    if seq_len == 0 || steps == 0 {
        return Err(Error::Invalid("seq_len and steps must be positive".into()));
    }
    let b = dense_forward(spec, seq_len).scaled(steps as f64);
    let mut a = echo(spec, "mdm", seq_len);
    a.steps = Some(steps);
    Ok(FlopsReport::new(b, seq_len as f64, steps as f64, a))
}

/// Diffusion cost over cached left-to-right cost for generating `len`
/// tokens with `steps` sampling steps.
pub fn mdm_over_ar_ratio(spec: &ModelSpec, len: usize, steps: usize) -> Result<f64> {
    let mut s = spec.clone();
    s.seq_len = s.seq_len.max(len);
    Ok(infer_flops_mdm(&s, len, steps)?.total / infer_flops_ar(&s, 0, len, true)?.total)
}

/// Slope of `log y` against `log x` by least squares.
pub fn log_log_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let n = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let cov: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let var: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    cov / var
}

pub const SWEEP_HEADER: &str = "length,steps,ar_cached,ar_uncached,mdm,mdm_over_ar_cached";

/// Generation-cost grid over lengths × sampling steps, for plotting.
pub fn sweep_csv(spec: &ModelSpec, lengths: &[usize], steps: &[usize]) -> Result<String> {
    let mut out = String::from(SWEEP_HEADER);
    out.push('\n');
    for &len in lengths {
        let mut s = spec.clone();
        s.seq_len = s.seq_len.max(len);
        let ar = infer_flops_ar(&s, 0, len, true)?.total;
        let ar_nc = infer_flops_ar(&s, 0, len, false)?.total;
        for &k in steps {
            let mdm = infer_flops_mdm(&s, len, k)?.total;
            out.push_str(&format!("{len},{k},{ar:e},{ar_nc:e},{mdm:e},{}\n", mdm / ar));
        }
    }
    Ok(out)
}
