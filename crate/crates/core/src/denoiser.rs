//! Denoisers as conditional tables, explicit tiny data distributions and
//! the exact (enumeration + quadrature) diffusion bound used as an oracle.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::schedule::{enumerate_mask_patterns, NoiseSchedule, TimeSampling};
use crate::tensor::{kernels, Rng, Scalar};
use crate::transformer::{AttentionMode, Model};
use crate::Token;

/// Anything that predicts clean tokens from a partially masked sequence.
pub trait Denoiser {
    /// Width of each predicted distribution.
    fn width(&self) -> usize;
    fn mask_token(&self) -> Token;
    /// Row-major `[len, width]` log-probabilities of the clean token at
    /// every position of `xt`. Only masked rows are meaningful.
    fn log_probs(&self, xt: &[Token]) -> Result<Vec<f64>>;
}

impl<T: Scalar> Denoiser for Model<T> {
    fn width(&self) -> usize {
        self.spec().vocab_size
    }

    fn mask_token(&self) -> Token {
        self.spec().mask_token
    }

    fn log_probs(&self, xt: &[Token]) -> Result<Vec<f64>> {
        if self.mode() != AttentionMode::Bidirectional {
            return Err(crate::transformer::ModelError::WrongMode {
                expected: AttentionMode::Bidirectional,
                actual: self.mode(),
            }
            .into());
        }
        let logits = self.logits(xt, 1)?;
        let mut out: Vec<f64> = logits.data().iter().map(|x| x.as_f64()).collect();
        for row in out.chunks_exact_mut(self.width()) {
            let lse = kernels::log_sum_exp(row);
            row.iter_mut().for_each(|x| *x -= lse);
        }
        Ok(out)
    }
}

/// Explicit distribution over sequences of fixed length `len` with tokens
/// in `0..vocab`.
#[derive(Clone, Debug, PartialEq)]
pub struct DataDistribution {
    vocab: usize,
    len: usize,
    support: Vec<(Vec<Token>, f64)>,
}

impl DataDistribution {
    pub fn new(vocab: usize, len: usize, support: Vec<(Vec<Token>, f64)>) -> Result<Self> {
        if vocab == 0 || len == 0 || support.is_empty() {
            return Err(Error::Invalid("empty data distribution".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for (x, p) in &support {
            if x.len() != len || x.iter().any(|&t| t as usize >= vocab) {
                return Err(Error::Invalid(format!("sequence {x:?} outside vocab {vocab} / length {len}")));
            }
            if !(*p >= 0.0) || !seen.insert(x.clone()) {
                return Err(Error::Invalid(format!("bad or duplicate entry for {x:?}")));
            }
        }
        let total: f64 = support.iter().map(|(_, p)| p).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Invalid(format!("probabilities sum to {total}")));
        }
        Ok(DataDistribution { vocab, len, support })
    }

    pub fn point_mass(vocab: usize, x: Vec<Token>) -> Result<Self> {
        let len = x.len();
        Self::new(vocab, len, vec![(x, 1.0)])
    }

    /// `n` distinct random sequences with random positive weights.
    pub fn random(vocab: usize, len: usize, n: usize, seed: u64) -> Result<Self> {
        let total = (vocab as f64).powi(len as i32);
        if n == 0 || n as f64 > total {
            return Err(Error::Invalid(format!("cannot pick {n} distinct sequences")));
        }
        let mut rng = Rng::new(seed);
        let mut seqs: Vec<Vec<Token>> = Vec::new();
        while seqs.len() < n {
            let x: Vec<Token> = (0..len).map(|_| rng.below(vocab) as Token).collect();
            if !seqs.contains(&x) {
                seqs.push(x);
            }
        }
        let w: Vec<f64> = (0..n).map(|_| 0.2 + rng.uniform()).collect();
        let z: f64 = w.iter().sum();
        Self::new(vocab, len, seqs.into_iter().zip(w.into_iter().map(|x| x / z)).collect())
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.support.is_empty()
    }

    pub fn support(&self) -> &[(Vec<Token>, f64)] {
        &self.support
    }

    pub fn prob(&self, x: &[Token]) -> f64 {
        self.support.iter().find(|(s, _)| s == x).map_or(0.0, |(_, p)| *p)
    }

    /// Data NLL `E[-ln p(x)]` in nats per sequence (the entropy).
    pub fn nll(&self) -> f64 {
        self.support.iter().filter(|(_, p)| *p > 0.0).map(|(_, p)| -p * p.ln()).sum()
    }

    pub fn sample(&self, rng: &mut Rng) -> Vec<Token> {
        let w: Vec<f64> = self.support.iter().map(|(_, p)| *p).collect();
        self.support[rng.categorical(&w)].0.clone()
    }

    /// Total-variation distance between this distribution and the empirical
    /// distribution of `samples`.
    pub fn tv_distance(&self, samples: &[Vec<Token>]) -> f64 {
        let mut counts: HashMap<&[Token], usize> = HashMap::new();
        for s in samples {
            *counts.entry(s.as_slice()).or_default() += 1;
        }
        let n = samples.len() as f64;
        let mut tv = 0.0;
        for (x, p) in &self.support {
            tv += (p - counts.remove(x.as_slice()).unwrap_or(0) as f64 / n).abs();
        }
        tv += counts.values().map(|&c| c as f64 / n).sum::<f64>();
        0.5 * tv
    }
}

/// The true conditionals `p(x0^i | unmasked tokens of xt)` of a data
/// distribution. Mask symbol is `vocab`.
#[derive(Clone, Debug)]
pub struct ExactDenoiser {
    data: DataDistribution,
}

impl ExactDenoiser {
    pub fn new(data: DataDistribution) -> Self {
        ExactDenoiser { data }
    }
}

impl Denoiser for ExactDenoiser {
    fn width(&self) -> usize {
        self.data.vocab
    }

    fn mask_token(&self) -> Token {
        self.data.vocab as Token
    }

    fn log_probs(&self, xt: &[Token]) -> Result<Vec<f64>> {
        let (k, mask) = (self.width(), self.mask_token());
        check_input(xt, self.data.len, k)?;
        let consistent: Vec<&(Vec<Token>, f64)> = self
            .data
            .support
            .iter()
            .filter(|(x, p)| *p > 0.0 && x.iter().zip(xt).all(|(&a, &b)| b == mask || a == b))
            .collect();
        let z: f64 = consistent.iter().map(|(_, p)| p).sum();
        let mut out = vec![f64::NEG_INFINITY; xt.len() * k];
        for (i, row) in out.chunks_exact_mut(k).enumerate() {
            if xt[i] != mask {
                row[xt[i] as usize] = 0.0;
            } else if z == 0.0 {
                row.fill(-(k as f64).ln());
            } else {
                let mut mass = vec![0.0; k];
                for (x, p) in &consistent {
                    mass[x[i] as usize] += p;
                }
                for (r, m) in row.iter_mut().zip(mass) {
                    *r = (m / z).ln();
                }
            }
        }
        Ok(out)
    }
}

/// Predicts the uniform distribution everywhere.
#[derive(Clone, Copy, Debug)]
pub struct UniformDenoiser {
    pub vocab: usize,
    pub len: usize,
}

impl Denoiser for UniformDenoiser {
    fn width(&self) -> usize {
        self.vocab
    }

    fn mask_token(&self) -> Token {
        self.vocab as Token
    }

    fn log_probs(&self, xt: &[Token]) -> Result<Vec<f64>> {
        check_input(xt, self.len, self.vocab)?;
        Ok(vec![-(self.vocab as f64).ln(); xt.len() * self.vocab])
    }
}

/// Arbitrary (but fixed) conditionals: a seeded random distribution for
/// every `(xt, position)`.
#[derive(Clone, Copy, Debug)]
pub struct RandomDenoiser {
    pub vocab: usize,
    pub len: usize,
    pub seed: u64,
    /// Logit scale; larger values give peakier tables.
    pub sharpness: f64,
}

impl Denoiser for RandomDenoiser {
    fn width(&self) -> usize {
        self.vocab
    }

    fn mask_token(&self) -> Token {
        self.vocab as Token
    }

    fn log_probs(&self, xt: &[Token]) -> Result<Vec<f64>> {
        check_input(xt, self.len, self.vocab)?;
        let code = xt.iter().fold(0u64, |acc, &t| acc * (self.vocab as u64 + 1) + t as u64);
        let mut rng = Rng::stream(self.seed, code);
        let mut out: Vec<f64> = (0..xt.len() * self.vocab).map(|_| self.sharpness * rng.normal()).collect();
        for row in out.chunks_exact_mut(self.vocab) {
            let lse = kernels::log_sum_exp(row);
            row.iter_mut().for_each(|x| *x -= lse);
        }
        Ok(out)
    }
}

fn check_input(xt: &[Token], len: usize, vocab: usize) -> Result<()> {
    if xt.len() != len || xt.iter().any(|&t| t as usize > vocab) {
        return Err(Error::Invalid(format!("input {xt:?} does not fit length {len} / vocab {vocab}")));
    }
    Ok(())
}

/// Gauss–Legendre nodes and weights on `[0, 1]`. Nodes are strictly
/// interior.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for j in 2..=n {
                let p2 = ((2 * j - 1) as f64 * x * p1 - (j - 1) as f64 * p0) / j as f64;
                p0 = p1;
                p1 = p2;
            }
            if n == 1 {
                p0 = 1.0;
                p1 = x;
            }
            dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = 0.5 * (1.0 - x);
        nodes[n - 1 - i] = 0.5 * (1.0 + x);
        weights[i] = 0.5 * w;
        weights[n - 1 - i] = 0.5 * w;
    }
    (nodes, weights)
}

pub const MIN_QUADRATURE_NODES: usize = 256;
pub const MAX_EXACT_VOCAB: usize = 4;
pub const MAX_EXACT_LEN: usize = 6;

/// The diffusion loss
/// `E_x0 ∫ w(t) E_{xt|x0} [Σ_{masked i} -ln p(x0^i | xt)] dt`
/// in nats per sequence, by enumerating every mask pattern and every
/// supported `x0`, with Gauss–Legendre quadrature over `t`.
pub fn mdm_loss_exact(denoiser: &dyn Denoiser, data: &DataDistribution, schedule: &NoiseSchedule, quadrature_points: usize) -> Result<f64> {
    if data.vocab > MAX_EXACT_VOCAB || data.len > MAX_EXACT_LEN {
        return Err(Error::Invalid(format!(
            "exact enumeration limited to vocab <= {MAX_EXACT_VOCAB}, L <= {MAX_EXACT_LEN}; got {} / {}",
            data.vocab, data.len
        )));
    }
    if quadrature_points < MIN_QUADRATURE_NODES {
        return Err(Error::Invalid(format!("need at least {MIN_QUADRATURE_NODES} quadrature nodes")));
    }
    let mask = denoiser.mask_token();
    if (mask as usize) < data.vocab || denoiser.width() < data.vocab {
        return Err(Error::Invalid("denoiser vocabulary does not cover the data".into()));
    }
    let len = data.len;
    let (nodes, qw) = gauss_legendre(quadrature_points);
    // time factor per masked count k: ∫ w(t) α^(L-k) (1-α)^k dt
    let mut time_factor = vec![0.0; len + 1];
    for (&t, &q) in nodes.iter().zip(&qw) {
        let a = schedule.alpha(t)?;
        let w = schedule.loss_weight(t)?;
        for (k, f) in time_factor.iter_mut().enumerate() {
            *f += q * w * a.powi((len - k) as i32) * (1.0 - a).powi(k as i32);
        }
    }
    let width = denoiser.width();
    let mut total = 0.0;
    for pattern in enumerate_mask_patterns(len)?.iter().filter(|p| !p.is_empty()) {
        let mut cost = 0.0;
        for (x0, p) in data.support.iter().filter(|(_, p)| *p > 0.0) {
            let mut xt = x0.clone();
            pattern.iter().for_each(|&i| xt[i] = mask);
            let lp = denoiser.log_probs(&xt)?;
            cost += p * pattern.iter().map(|&i| -lp[i * width + x0[i] as usize]).sum::<f64>();
        }
        total += time_factor[pattern.len()] * cost;
    }
    Ok(total)
}

/// One Monte Carlo draw of the diffusion loss for a single clean sequence:
/// `w · Σ_{masked i} -ln p(x0^i | xt)` (nats per sequence).
pub fn mdm_loss_draw(
    denoiser: &dyn Denoiser,
    x0: &[Token],
    schedule: &NoiseSchedule,
    sampling: TimeSampling,
    ensure_masked: bool,
    rng: &mut Rng,
) -> Result<f64> {
    let (t, w) = sampling.sample(schedule, rng)?;
    let mut s = crate::schedule::corrupt(x0, t, schedule, denoiser.mask_token(), rng)?;
    if ensure_masked {
        s.ensure_masked(denoiser.mask_token(), rng);
    }
    if s.masked_positions.is_empty() {
        return Ok(0.0);
    }
    let lp = denoiser.log_probs(&s.xt)?;
    let width = denoiser.width();
    Ok(w * s.masked_positions.iter().map(|&i| -lp[i * width + x0[i] as usize]).sum::<f64>())
}
