//! Noise schedules, the absorbing (masking) forward kernel and mask-pattern
//! enumeration for exact small-instance oracles.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use thiserror::Error;

use crate::tensor::Rng;
use crate::Token;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScheduleError {
    #[error("noise level {0} outside the allowed range")]
    TimeOutOfRange(f64),
    #[error("clean sequence contains the mask symbol at position {0}")]
    MaskInInput(usize),
    #[error("pattern enumeration limited to L <= {max}, got {len}")]
    TooLong { len: usize, max: usize },
    #[error("pattern position {pos} invalid for length {len}")]
    BadPattern { pos: usize, len: usize },
    #[error("invalid schedule: {0}")]
    Invalid(String),
}

pub type Result<T, E = ScheduleError> = std::result::Result<T, E>;

type ScalarFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// Probability `alpha(t)` that a token is still clean at noise level `t`.
#[derive(Clone)]
pub enum NoiseSchedule {
    /// `alpha(t) = 1 - t`.
    Linear,
    /// `alpha(t) = 1 - t^p`, `p > 0`.
    Polynomial(f64),
    /// `alpha(t) = cos(pi t / 2)`.
    Cosine,
    /// User-supplied monotone schedule; see [`NoiseSchedule::custom`].
    Custom {
        name: String,
        alpha: ScalarFn,
        alpha_prime: ScalarFn,
    },
}

impl fmt::Debug for NoiseSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self}")
    }
}

impl fmt::Display for NoiseSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NoiseSchedule::Linear => write!(f, "linear"),
            NoiseSchedule::Polynomial(p) => write!(f, "poly:{p}"),
            NoiseSchedule::Cosine => write!(f, "cosine"),
            NoiseSchedule::Custom { name, .. } => write!(f, "custom:{name}"),
        }
    }
}

impl FromStr for NoiseSchedule {
    type Err = ScheduleError;

    /// Accepts `linear`, `cosine` and `poly:<p>`.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(NoiseSchedule::Linear),
            "cosine" => Ok(NoiseSchedule::Cosine),
            _ => match s.strip_prefix("poly:").map(str::parse::<f64>) {
                Some(Ok(p)) if p > 0.0 && p.is_finite() => Ok(NoiseSchedule::Polynomial(p)),
                _ => Err(ScheduleError::Invalid(format!("unknown schedule {s:?}"))),
            },
        }
    }
}

impl NoiseSchedule {
    /// Wraps a custom schedule after checking the endpoint conditions and
    /// strict decrease on a grid of 1000 interior points.
    pub fn custom(
        name: impl Into<String>,
        alpha: impl Fn(f64) -> f64 + Send + Sync + 'static,
        alpha_prime: impl Fn(f64) -> f64 + Send + Sync + 'static,
    ) -> Result<Self> {
        if (alpha(0.0) - 1.0).abs() > 1e-12 || alpha(1.0).abs() > 1e-12 {
            return Err(ScheduleError::Invalid("alpha(0) must be 1 and alpha(1) must be 0".into()));
        }
        let mut prev = alpha(0.0);
        for i in 1..=1000 {
            let a = alpha(i as f64 / 1000.0);
            if !(a < prev) {
                return Err(ScheduleError::Invalid(format!("alpha not strictly decreasing near t={}", i as f64 / 1000.0)));
            }
            prev = a;
        }
        Ok(NoiseSchedule::Custom {
            name: name.into(),
            alpha: Arc::new(alpha),
            alpha_prime: Arc::new(alpha_prime),
        })
    }

    fn check_t(t: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&t) {
            return Err(ScheduleError::TimeOutOfRange(t));
        }
        Ok(())
    }

    /// `alpha(t)` for `t` in `[0, 1]`; exactly 1 at 0 and 0 at 1.
    pub fn alpha(&self, t: f64) -> Result<f64> {
        Self::check_t(t)?;
        if t == 0.0 {
            return Ok(1.0);
        }
        if t == 1.0 {
            return Ok(0.0);
        }
        Ok(match self {
            NoiseSchedule::Linear => 1.0 - t,
            NoiseSchedule::Polynomial(p) => 1.0 - t.powf(*p),
            NoiseSchedule::Cosine => (std::f64::consts::FRAC_PI_2 * t).cos(),
            NoiseSchedule::Custom { alpha, .. } => alpha(t),
        })
    }

    pub fn alpha_prime(&self, t: f64) -> Result<f64> {
        Self::check_t(t)?;
        Ok(match self {
            NoiseSchedule::Linear => -1.0,
            NoiseSchedule::Polynomial(p) => -p * t.powf(p - 1.0),
            NoiseSchedule::Cosine => -std::f64::consts::FRAC_PI_2 * (std::f64::consts::FRAC_PI_2 * t).sin(),
            NoiseSchedule::Custom { alpha_prime, .. } => alpha_prime(t),
        })
    }

    /// Loss weight `alpha'(t) / (alpha(t) - 1)`; `1/t` for the linear
    /// schedule. Undefined at `t = 0`.
    pub fn loss_weight(&self, t: f64) -> Result<f64> {
        if !(t > 0.0 && t <= 1.0) {
            return Err(ScheduleError::TimeOutOfRange(t));
        }
        if let NoiseSchedule::Linear = self {
            return Ok(1.0 / t);
        }
        Ok(self.alpha_prime(t)? / (self.alpha(t)? - 1.0))
    }

    /// Smallest `t` with `alpha(t) <= target`, by bisection.
    pub fn inverse_alpha(&self, target: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&target) {
            return Err(ScheduleError::Invalid(format!("alpha target {target} outside [0,1]")));
        }
        if let NoiseSchedule::Linear = self {
            return Ok(1.0 - target);
        }
        let (mut lo, mut hi) = (0.0f64, 1.0f64);
        for _ in 0..100 {
            let mid = 0.5 * (lo + hi);
            if self.alpha(mid)? > target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(hi)
    }
}

/// A clean sequence, its corrupted copy and the masked positions.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedSample {
    pub x0: Vec<Token>,
    pub xt: Vec<Token>,
    pub masked_positions: Vec<usize>,
    pub t: f64,
}

impl MaskedSample {
    /// Masks one uniformly chosen position if none is masked.
    pub fn ensure_masked(&mut self, mask: Token, rng: &mut Rng) {
        if self.masked_positions.is_empty() && !self.x0.is_empty() {
            let i = rng.below(self.x0.len());
            self.xt[i] = mask;
            self.masked_positions.push(i);
        }
    }
}

/// Forward kernel: each position kept with probability `alpha(t)`,
/// otherwise replaced by `mask`, independently.
pub fn corrupt(x0: &[Token], t: f64, schedule: &NoiseSchedule, mask: Token, rng: &mut Rng) -> Result<MaskedSample> {
    if !(t > 0.0 && t <= 1.0) {
        return Err(ScheduleError::TimeOutOfRange(t));
    }
    if let Some(i) = x0.iter().position(|&x| x == mask) {
        return Err(ScheduleError::MaskInInput(i));
    }
    let keep = schedule.alpha(t)?;
    let mut xt = x0.to_vec();
    let mut masked_positions = Vec::new();
    for (i, x) in xt.iter_mut().enumerate() {
        if rng.uniform() >= keep {
            *x = mask;
            masked_positions.push(i);
        }
    }
    Ok(MaskedSample {
        x0: x0.to_vec(),
        xt,
        masked_positions,
        t,
    })
}

/// How training draws the noise level of each sequence.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TimeSampling {
    /// `t ~ U(eps, 1]`, estimator weight `w(t)`.
    Uniform { eps: f64 },
    /// `t` with density proportional to `w(t)` on `(eps, 1]`; every draw then
    /// carries the constant weight `-ln(1 - alpha(eps))`.
    Importance { eps: f64 },
}

impl Default for TimeSampling {
    fn default() -> Self {
        TimeSampling::Uniform { eps: 1e-3 }
    }
}

impl TimeSampling {
    /// Returns `(t, estimator weight)`.
    pub fn sample(&self, schedule: &NoiseSchedule, rng: &mut Rng) -> Result<(f64, f64)> {
        let u = rng.uniform();
        match *self {
            TimeSampling::Uniform { eps } => {
                let t = eps + (1.0 - eps) * (1.0 - u);
                Ok((t, schedule.loss_weight(t)?))
            }
            TimeSampling::Importance { eps } => {
                let clean_at_eps = 1.0 - schedule.alpha(eps)?;
                let z = -clean_at_eps.ln();
                let alpha = 1.0 - clean_at_eps.powf(1.0 - u);
                let t = match schedule {
                    NoiseSchedule::Linear => eps.powf(1.0 - u),
                    _ => schedule.inverse_alpha(alpha)?,
                };
                Ok((t.clamp(eps, 1.0), z))
            }
        }
    }
}

pub const MAX_ENUMERATION_LEN: usize = 20;

/// All `2^len` subsets of `0..len`, ordered by their bitmask value.
pub fn enumerate_mask_patterns(len: usize) -> Result<Vec<Vec<usize>>> {
    if len > MAX_ENUMERATION_LEN {
        return Err(ScheduleError::TooLong {
            len,
            max: MAX_ENUMERATION_LEN,
        });
    }
    Ok((0u32..1 << len).map(|bits| (0..len).filter(|i| bits >> i & 1 == 1).collect()).collect())
}

/// Probability that exactly `pattern` is masked at level `t`:
/// `alpha^(L-|P|) (1-alpha)^|P|`.
pub fn pattern_probability(schedule: &NoiseSchedule, t: f64, pattern: &[usize], len: usize) -> Result<f64> {
    let mut seen = vec![false; len];
    for &p in pattern {
        if p >= len || seen[p] {
            return Err(ScheduleError::BadPattern { pos: p, len });
        }
        seen[p] = true;
    }
    let a = schedule.alpha(t)?;
    let k = pattern.len() as i32;
    Ok(a.powi(len as i32 - k) * (1.0 - a).powi(k))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_alpha_values() {
        let s = NoiseSchedule::Linear;
        assert_eq!(s.alpha(0.0).unwrap(), 1.0);
        assert_eq!(s.alpha(1.0).unwrap(), 0.0);
        assert!((s.alpha(0.3).unwrap() - 0.7).abs() < 1e-15);
        assert!(s.alpha(1.5).is_err());
        assert!(s.alpha(-0.1).is_err());
    }

    #[test]
    fn endpoints_exact_for_all_builtin_schedules() {
        for s in [NoiseSchedule::Linear, NoiseSchedule::Cosine, NoiseSchedule::Polynomial(2.0)] {
            assert_eq!(s.alpha(0.0).unwrap(), 1.0, "{s}");
            assert_eq!(s.alpha(1.0).unwrap(), 0.0, "{s}");
            let mut prev = 1.0;
            for i in 1..100 {
                let a = s.alpha(i as f64 / 100.0).unwrap();
                assert!(a < prev && (0.0..=1.0).contains(&a));
                prev = a;
            }
        }
    }

    #[test]
    fn loss_weight_values() {
        let s = NoiseSchedule::Linear;
        assert_eq!(s.loss_weight(0.5).unwrap(), 2.0);
        assert_eq!(s.loss_weight(1.0).unwrap(), 1.0);
        assert!(s.loss_weight(0.0).is_err());
        // alpha = 1 - t^2: alpha'(0.5) = -1, alpha(0.5) - 1 = -0.25
        let q = NoiseSchedule::Polynomial(2.0);
        assert!((q.loss_weight(0.5).unwrap() - 4.0).abs() < 1e-12);
        let c = NoiseSchedule::custom("quad", |t| 1.0 - t * t, |t| -2.0 * t).unwrap();
        assert!((c.loss_weight(0.5).unwrap() - 4.0).abs() < 1e-12);
    }

    #[test]
    fn loss_weight_matches_finite_difference_form() {
        for s in [NoiseSchedule::Cosine, NoiseSchedule::Polynomial(1.7)] {
            for &t in &[0.1, 0.4, 0.9] {
                let h = 1e-6;
                let d = (s.alpha(t + h).unwrap() - s.alpha(t - h).unwrap()) / (2.0 * h);
                let w = d / (s.alpha(t).unwrap() - 1.0);
                assert!((w - s.loss_weight(t).unwrap()).abs() < 1e-6 * w.abs());
            }
        }
    }

    #[test]
    fn custom_schedule_validation() {
        assert!(NoiseSchedule::custom("up", |t| t, |_| 1.0).is_err());
        assert!(NoiseSchedule::custom("flat", |t| if t < 1.0 { 1.0 } else { 0.0 }, |_| 0.0).is_err());
    }

    #[test]
    fn schedule_parsing() {
        assert!(matches!("linear".parse::<NoiseSchedule>(), Ok(NoiseSchedule::Linear)));
        assert!(matches!("poly:2".parse::<NoiseSchedule>(), Ok(NoiseSchedule::Polynomial(p)) if p == 2.0));
        assert!("poly:-1".parse::<NoiseSchedule>().is_err());
        assert!("sigmoid".parse::<NoiseSchedule>().is_err());
    }

    #[test]
    fn corrupt_extremes() {
        let s = NoiseSchedule::Linear;
        let x0: Vec<Token> = (0..8).collect();
        let mut rng = Rng::new(1);
        let full = corrupt(&x0, 1.0, &s, 99, &mut rng).unwrap();
        assert!(full.xt.iter().all(|&x| x == 99));
        assert_eq!(full.masked_positions, (0..8).collect::<Vec<_>>());
        let clean = corrupt(&x0, 1e-9, &s, 99, &mut rng).unwrap();
        assert_eq!(clean.xt, x0);
        assert!(corrupt(&[1, 99], 0.5, &s, 99, &mut rng).is_err());
        assert!(corrupt(&x0, 0.0, &s, 99, &mut rng).is_err());
    }

    #[test]
    fn masked_fraction_concentrates() {
        let s = NoiseSchedule::Linear;
        let x0 = vec![3 as Token; 10_000];
        let sample = corrupt(&x0, 0.5, &s, 99, &mut Rng::new(2)).unwrap();
        let frac = sample.masked_positions.len() as f64 / 10_000.0;
        assert!((frac - 0.5).abs() <= 0.015, "{frac}");
    }

    #[test]
    fn ensure_masked_forces_one() {
        let x0: Vec<Token> = vec![1, 2, 3];
        let mut s = corrupt(&x0, 1e-12, &NoiseSchedule::Linear, 9, &mut Rng::new(3)).unwrap();
        assert!(s.masked_positions.is_empty());
        s.ensure_masked(9, &mut Rng::new(4));
        assert_eq!(s.masked_positions.len(), 1);
        assert_eq!(s.xt.iter().filter(|&&x| x == 9).count(), 1);
    }

    #[test]
    fn enumeration_counts() {
        assert_eq!(enumerate_mask_patterns(3).unwrap().len(), 8);
        assert_eq!(enumerate_mask_patterns(0).unwrap(), vec![Vec::<usize>::new()]);
        assert_eq!(enumerate_mask_patterns(1).unwrap(), vec![vec![], vec![0]]);
        assert!(enumerate_mask_patterns(21).is_err());
        let pats = enumerate_mask_patterns(10).unwrap();
        let uniq: std::collections::HashSet<_> = pats.iter().collect();
        assert_eq!(uniq.len(), 1024);
    }

    #[test]
    fn pattern_probability_values() {
        let s = NoiseSchedule::Linear;
        assert!((pattern_probability(&s, 0.5, &[1], 2).unwrap() - 0.25).abs() < 1e-15);
        assert_eq!(pattern_probability(&s, 1.0, &[0, 1, 2], 3).unwrap(), 1.0);
        assert!(pattern_probability(&s, 0.5, &[2], 2).is_err());
        assert!(pattern_probability(&s, 0.5, &[1, 1], 2).is_err());
    }

    #[test]
    fn importance_sampling_stays_in_range() {
        let mut rng = Rng::new(5);
        for s in [NoiseSchedule::Linear, NoiseSchedule::Cosine] {
            let sampler = TimeSampling::Importance { eps: 1e-3 };
            for _ in 0..1000 {
                let (t, w) = sampler.sample(&s, &mut rng).unwrap();
                assert!((1e-3..=1.0).contains(&t));
                assert!(w > 0.0);
            }
        }
    }
}
