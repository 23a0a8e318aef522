//! Generation: left-to-right decoding for the causal model and the
//! absorbing reverse process for the diffusion denoiser.

use crate::denoiser::Denoiser;
use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;
use crate::tensor::{Rng, Scalar};
use crate::transformer::{AttentionMode, KvCache, Model, ModelError};
use crate::Token;

/// Decreasing times `1 = t_0 > t_1 > ... > t_N = 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct StepGrid {
    times: Vec<f64>,
}

impl StepGrid {
    pub fn new(times: Vec<f64>) -> Result<Self> {
        if times.len() < 2 || times[0] != 1.0 || *times.last().unwrap() != 0.0 {
            return Err(Error::Invalid("step grid must run from exactly 1 down to exactly 0".into()));
        }
        if times.windows(2).any(|w| !(w[1] < w[0])) {
            return Err(Error::Invalid("step grid must be strictly decreasing".into()));
        }
        Ok(StepGrid { times })
    }

    /// `t_k = 1 - k/N`.
    pub fn uniform(steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Invalid("at least one step required".into()));
        }
        let mut times: Vec<f64> = (0..=steps).map(|k| 1.0 - k as f64 / steps as f64).collect();
        times[steps] = 0.0;
        Self::new(times)
    }

    pub fn steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }
}

/// Draws from `exp(logp / temperature)` over the allowed entries; argmax
/// (lowest index on ties) at temperature 0.
fn sample_row(logp: &[f64], temperature: f64, exclude: Option<usize>, rng: &mut Rng) -> usize {
    let allowed = |i: usize| Some(i) != exclude && logp[i] > f64::NEG_INFINITY;
    if temperature <= 0.0 {
        let mut best = None;
        for i in (0..logp.len()).filter(|&i| allowed(i)) {
            if best.is_none_or(|b: usize| logp[i] > logp[b]) {
                best = Some(i);
            }
        }
        return best.unwrap_or(0);
    }
    let top = (0..logp.len()).filter(|&i| allowed(i)).map(|i| logp[i]).fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = (0..logp.len())
        .map(|i| if allowed(i) { ((logp[i] - top) / temperature).exp() } else { 0.0 })
        .collect();
    rng.categorical(&w)
}

/// Decodes `gen_len` tokens after `prompt`. With `use_cache` each token
/// costs one incremental forward; otherwise the whole prefix is re-run.
/// Both paths consume the generator identically.
pub fn ar_generate<T: Scalar>(
    model: &Model<T>,
    prompt: &[Token],
    gen_len: usize,
    temperature: f64,
    use_cache: bool,
    rng: &mut Rng,
) -> Result<Vec<Token>> {
    model.require_mode(AttentionMode::Causal)?;
    if !(temperature >= 0.0) {
        return Err(Error::Invalid(format!("temperature {temperature} must be >= 0")));
    }
    let capacity = model.spec().seq_len;
    if prompt.len() + gen_len > capacity {
        return Err(ModelError::ContextOverflow {
            len: prompt.len() + gen_len,
            capacity,
        }
        .into());
    }
    let mut out = prompt.to_vec();
    if gen_len == 0 {
        return Ok(out);
    }
    if prompt.is_empty() {
        return Err(Error::Invalid("decoding needs a non-empty prompt".into()));
    }
    let k = model.spec().vocab_size;
    let mask = Some(model.spec().mask_token as usize);
    let mut cache = use_cache.then(|| KvCache::new(model));
    let mut last: Vec<f64> = Vec::new();
    if let Some(c) = cache.as_mut() {
        for &t in prompt {
            last = model.forward_incremental(t, c)?.iter().map(|x| x.as_f64()).collect();
        }
    }
    for step in 0..gen_len {
        if cache.is_none() {
            let logits = model.logits(&out, 1)?;
            last = logits.data()[(out.len() - 1) * k..].iter().map(|x| x.as_f64()).collect();
        }
        let lse = crate::tensor::kernels::log_sum_exp(&last);
        let logp: Vec<f64> = last.iter().map(|x| x - lse).collect();
        let next = sample_row(&logp, temperature, mask, rng) as Token;
        out.push(next);
        if let Some(c) = cache.as_mut() {
            if step + 1 < gen_len {
                last = model.forward_incremental(next, c)?.iter().map(|x| x.as_f64()).collect();
            }
        }
    }
    Ok(out)
}

/// Probability that a masked position is still masked at `s` given it was
/// masked at `t`: `(1 - alpha_s) / (1 - alpha_t)`.
pub fn remain_probability(schedule: &NoiseSchedule, t: f64, s: f64) -> Result<f64> {
    if !(0.0 <= s && s < t && t <= 1.0) {
        return Err(Error::Invalid(format!("reverse step needs 0 <= s < t <= 1, got s={s}, t={t}")));
    }
    Ok((1.0 - schedule.alpha(s)?) / (1.0 - schedule.alpha(t)?))
}

/// One step of the reverse process from level `t` to `s < t`. Revealed
/// tokens are copied; each masked position stays masked with probability
/// [`remain_probability`], otherwise it is filled with a draw from the
/// denoiser's prediction (the mask symbol itself is never drawn).
pub fn reverse_step(
    denoiser: &dyn Denoiser,
    xt: &[Token],
    t: f64,
    s: f64,
    schedule: &NoiseSchedule,
    temperature: f64,
    rng: &mut Rng,
) -> Result<Vec<Token>> {
    let stay = remain_probability(schedule, t, s)?;
    let mask = denoiser.mask_token();
    let reveal: Vec<usize> = (0..xt.len()).filter(|&i| xt[i] == mask && rng.uniform() >= stay).collect();
    let mut out = xt.to_vec();
    if reveal.is_empty() {
        return Ok(out);
    }
    let width = denoiser.width();
    let lp = denoiser.log_probs(xt)?;
    for i in reveal {
        let row = &lp[i * width..(i + 1) * width];
        out[i] = sample_row(row, temperature, Some(mask as usize), rng) as Token;
    }
    Ok(out)
}

/// Runs the reverse process over `grid` from `start` (masked positions are
/// generated, others held fixed). `trace` receives every intermediate state.
pub fn mdm_infill_traced(
    denoiser: &dyn Denoiser,
    start: &[Token],
    grid: &StepGrid,
    schedule: &NoiseSchedule,
    temperature: f64,
    rng: &mut Rng,
    mut trace: impl FnMut(&[Token]),
) -> Result<Vec<Token>> {
    let mut x = start.to_vec();
    trace(&x);
    for w in grid.times.windows(2) {
        x = reverse_step(denoiser, &x, w[0], w[1], schedule, temperature, rng)?;
        trace(&x);
    }
    debug_assert!(!x.contains(&denoiser.mask_token()));
    Ok(x)
}

/// Fills the masked positions of `start`, keeping every other token fixed.
pub fn mdm_infill(
    denoiser: &dyn Denoiser,
    start: &[Token],
    grid: &StepGrid,
    schedule: &NoiseSchedule,
    temperature: f64,
    rng: &mut Rng,
) -> Result<Vec<Token>> {
    mdm_infill_traced(denoiser, start, grid, schedule, temperature, rng, |_| {})
}

/// Generates `gen_len` tokens from the fully masked sequence.
pub fn mdm_generate(
    denoiser: &dyn Denoiser,
    gen_len: usize,
    grid: &StepGrid,
    schedule: &NoiseSchedule,
    temperature: f64,
    rng: &mut Rng,
) -> Result<Vec<Token>> {
    let start = vec![denoiser.mask_token(); gen_len];
    mdm_infill(denoiser, &start, grid, schedule, temperature, rng)
}

/// Prompt-conditioned diffusion generation: `prompt` followed by `gen_len`
/// masked positions.
pub fn mdm_complete(
    denoiser: &dyn Denoiser,
    prompt: &[Token],
    gen_len: usize,
    grid: &StepGrid,
    schedule: &NoiseSchedule,
    temperature: f64,
    rng: &mut Rng,
) -> Result<Vec<Token>> {
    let mut start = prompt.to_vec();
    start.extend(std::iter::repeat_n(denoiser.mask_token(), gen_len));
    mdm_infill(denoiser, &start, grid, schedule, temperature, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{DataDistribution, ExactDenoiser, UniformDenoiser};
    use crate::transformer::ModelSpec;

    fn causal() -> Model<f32> {
        Model::init(
            ModelSpec {
                vocab_size: 20,
                mask_token: 19,
                seq_len: 24,
                n_layers: 2,
                d_model: 16,
                n_heads: 2,
                init_std: 0.5,
                ..ModelSpec::default()
            },
            4,
        )
        .unwrap()
    }

    #[test]
    fn grid_validation() {
        let g = StepGrid::uniform(4).unwrap();
        assert_eq!(g.times(), &[1.0, 0.75, 0.5, 0.25, 0.0]);
        assert!(StepGrid::new(vec![1.0, 0.5]).is_err());
        assert!(StepGrid::new(vec![0.9, 0.0]).is_err());
        assert!(StepGrid::new(vec![1.0, 0.5, 0.5, 0.0]).is_err());
        assert!(StepGrid::uniform(0).is_err());
    }

    #[test]
    fn ar_decoding_is_deterministic_and_cache_agnostic() {
        let m = causal();
        let prompt = [1, 2, 3];
        let a = ar_generate(&m, &prompt, 12, 0.0, true, &mut Rng::new(0)).unwrap();
        let b = ar_generate(&m, &prompt, 12, 0.0, true, &mut Rng::new(1)).unwrap();
        let c = ar_generate(&m, &prompt, 12, 0.0, false, &mut Rng::new(2)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, c);
        assert_eq!(&a[..3], &prompt);
        for seed in 0..5 {
            let x = ar_generate(&m, &prompt, 12, 1.0, true, &mut Rng::new(seed)).unwrap();
            let y = ar_generate(&m, &prompt, 12, 1.0, false, &mut Rng::new(seed)).unwrap();
            assert_eq!(x, y);
            assert!(!x.contains(&19));
        }
    }

    #[test]
    fn ar_decoding_edge_cases() {
        let m = causal();
        assert_eq!(ar_generate(&m, &[5, 6], 0, 0.0, true, &mut Rng::new(0)).unwrap(), vec![5, 6]);
        assert!(ar_generate(&m, &[5; 20], 5, 0.0, true, &mut Rng::new(0)).is_err());
        assert!(ar_generate(&m, &[5], 3, -1.0, true, &mut Rng::new(0)).is_err());
        let bidi: Model = Model::init(m.spec().clone().with_mode(AttentionMode::Bidirectional), 4).unwrap();
        assert!(ar_generate(&bidi, &[5], 3, 0.0, true, &mut Rng::new(0)).is_err());
    }

    #[test]
    fn remain_probability_values() {
        let s = NoiseSchedule::Linear;
        // alpha_s = 0.5, alpha_t = 0.25
        assert!((remain_probability(&s, 0.75, 0.5).unwrap() - 0.5 / 0.75).abs() < 1e-15);
        assert_eq!(remain_probability(&s, 0.3, 0.0).unwrap(), 0.0);
        assert!(remain_probability(&s, 0.5, 0.5).is_err());
        assert!(remain_probability(&s, 0.5, 0.7).is_err());
    }

    #[test]
    fn reveal_frequency_matches_kernel() {
        let n = 10_000;
        let d = UniformDenoiser { vocab: 3, len: n };
        let xt = vec![3; n];
        let out = reverse_step(&d, &xt, 0.75, 0.5, &NoiseSchedule::Linear, 1.0, &mut Rng::new(5)).unwrap();
        let stay = out.iter().filter(|&&x| x == 3).count() as f64;
        let p = 0.5 / 0.75;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        assert!((stay - n as f64 * p).abs() <= 3.0 * sigma, "{stay}");
    }

    #[test]
    fn final_step_reveals_everything_and_keeps_revealed_tokens() {
        let d = UniformDenoiser { vocab: 3, len: 6 };
        let xt = vec![0, 3, 2, 3, 3, 1];
        let out = reverse_step(&d, &xt, 0.4, 0.0, &NoiseSchedule::Linear, 1.0, &mut Rng::new(1)).unwrap();
        assert!(!out.contains(&3));
        for i in [0, 2, 5] {
            assert_eq!(out[i], xt[i]);
        }
        assert!(reverse_step(&d, &xt, 0.4, 0.4, &NoiseSchedule::Linear, 1.0, &mut Rng::new(1)).is_err());
    }

    #[test]
    fn point_mass_is_reproduced() {
        let x = vec![2, 0, 1, 1, 2];
        let d = ExactDenoiser::new(DataDistribution::point_mass(3, x.clone()).unwrap());
        for steps in [1, 5] {
            let g = StepGrid::uniform(steps).unwrap();
            assert_eq!(mdm_generate(&d, 5, &g, &NoiseSchedule::Linear, 0.0, &mut Rng::new(3)).unwrap(), x);
        }
    }

    #[test]
    fn unmasking_is_monotone_and_single_step_is_parallel() {
        let d = UniformDenoiser { vocab: 3, len: 8 };
        let mut states = Vec::new();
        let g = StepGrid::uniform(6).unwrap();
        mdm_infill_traced(&d, &[3; 8], &g, &NoiseSchedule::Linear, 1.0, &mut Rng::new(2), |x| states.push(x.to_vec())).unwrap();
        assert_eq!(states.len(), 7);
        for w in states.windows(2) {
            for i in 0..8 {
                if w[0][i] != 3 {
                    assert_eq!(w[1][i], w[0][i]);
                }
            }
        }
        let mut one = Vec::new();
        mdm_infill_traced(&d, &[3; 8], &StepGrid::uniform(1).unwrap(), &NoiseSchedule::Linear, 1.0, &mut Rng::new(2), |x| one.push(x.to_vec())).unwrap();
        assert_eq!(one.len(), 2);
        assert!(one[0].iter().all(|&x| x == 3) && !one[1].contains(&3));
    }

    #[test]
    fn infill_keeps_prompt_positions() {
        let data = DataDistribution::new(3, 4, vec![(vec![0, 1, 2, 0], 0.5), (vec![1, 1, 0, 2], 0.5)]).unwrap();
        let d = ExactDenoiser::new(data);
        let g = StepGrid::uniform(4).unwrap();
        for seed in 0..20 {
            let out = mdm_infill(&d, &[1, 3, 3, 3], &g, &NoiseSchedule::Linear, 1.0, &mut Rng::new(seed)).unwrap();
            assert_eq!(out, vec![1, 1, 0, 2]);
        }
    }

    #[test]
    fn fine_grids_recover_the_data_distribution() {
        let data = DataDistribution::new(
            3,
            4,
            vec![(vec![0, 1, 2, 0], 0.4), (vec![1, 1, 0, 2], 0.3), (vec![2, 0, 2, 1], 0.2), (vec![0, 2, 1, 1], 0.1)],
        )
        .unwrap();
        let d = ExactDenoiser::new(data.clone());
        let g = StepGrid::uniform(256).unwrap();
        let mut rng = Rng::new(9);
        let samples: Vec<_> = (0..10_000).map(|_| mdm_generate(&d, 4, &g, &NoiseSchedule::Linear, 1.0, &mut rng).unwrap()).collect();
        let tv = data.tv_distance(&samples);
        assert!(tv <= 0.05, "tv {tv}");
    }

    #[test]
    fn single_step_samples_the_product_of_marginals() {
        let data = DataDistribution::new(2, 2, vec![(vec![0, 0], 0.5), (vec![1, 1], 0.5)]).unwrap();
        let d = ExactDenoiser::new(data);
        let g = StepGrid::uniform(1).unwrap();
        let mut rng = Rng::new(4);
        let n = 10_000;
        let mixed = (0..n)
            .filter(|_| {
                let x = mdm_generate(&d, 2, &g, &NoiseSchedule::Linear, 1.0, &mut rng).unwrap();
                x[0] != x[1]
            })
            .count() as f64;
        // independent fair coins disagree half the time
        let sigma = (n as f64 * 0.25).sqrt();
        assert!((mixed - 0.5 * n as f64).abs() <= 3.0 * sigma);
    }
}
