use std::fmt::Write as _;
use std::path::PathBuf;

use crate::error::{Error, Result};
use crate::objectives::{Normalize, ObjectiveKind};
use crate::schedule::{NoiseSchedule, TimeSampling};
use crate::transformer::ModelSpec;

/// Everything a run depends on. Serialized as flat `key=value` text.
#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub name: String,
    pub objective: ObjectiveKind,
    pub mask_ratio: f64,
    pub exclude_masked_targets: bool,
    pub model: ModelSpec,

    pub schedule: NoiseSchedule,
    pub n_mc: usize,
    pub normalize: Normalize,
    pub importance_sampling: bool,
    pub t_eps: f64,
    pub ensure_masked: bool,

    pub peak_lr: f64,
    pub final_lr: f64,
    pub warmup_steps: u64,
    pub decay_fraction: f64,
    /// 0 means every full batch of the token budget.
    pub total_steps: u64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,

    pub batch_size: usize,
    pub unique_tokens: usize,
    pub total_tokens: usize,
    pub train_path: Option<PathBuf>,
    pub val_path: Option<PathBuf>,
    pub cloze_path: Option<PathBuf>,
    pub tier: String,

    pub eval_every: u64,
    pub checkpoint_every: u64,
    pub val_windows: usize,
    pub rotate_val: bool,
    pub cloze_items: usize,
    pub scoring_t_grid: Vec<f64>,
    pub scoring_draws: usize,
    pub eval_seed: u64,
    pub seed: u64,
    /// Stop (as if interrupted) after this step; 0 runs to the end.
    pub stop_after: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            name: "run".into(),
            objective: ObjectiveKind::Ar,
            mask_ratio: 0.0,
            exclude_masked_targets: false,
            model: ModelSpec::default(),
            schedule: NoiseSchedule::Linear,
            n_mc: 1,
            normalize: Normalize::Seq,
            importance_sampling: false,
            t_eps: 1e-3,
            ensure_masked: true,
            peak_lr: 1e-3,
            final_lr: 1e-4,
            warmup_steps: 100,
            decay_fraction: 0.1,
            total_steps: 0,
            weight_decay: 0.1,
            grad_clip: 1.0,
            beta1: 0.9,
            beta2: 0.95,
            adam_eps: 1e-8,
            batch_size: 32,
            unique_tokens: 65_536,
            total_tokens: 65_536 * 200,
            train_path: None,
            val_path: None,
            cloze_path: None,
            tier: "default".into(),
            eval_every: 100,
            checkpoint_every: 200,
            val_windows: 16,
            rotate_val: true,
            cloze_items: 0,
            scoring_t_grid: vec![0.25, 0.5, 0.75],
            scoring_draws: 4,
            eval_seed: 1234,
            seed: 0,
            stop_after: 0,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

const MODEL_KEYS: [&str; 11] = [
    "seq_len", "n_layers", "d_model", "n_heads", "ffn_mult", "dropout", "init_std", "rope_base", "qk_norm", "bias_free", "vocab_size",
];

impl TrainConfig {
    pub fn time_sampling(&self) -> TimeSampling {
        if self.importance_sampling {
            TimeSampling::Importance { eps: self.t_eps }
        } else {
            TimeSampling::Uniform { eps: self.t_eps }
        }
    }

    /// Model spec with the attention mode the objective needs.
    pub fn model_spec(&self) -> ModelSpec {
        self.model.clone().with_mode(self.objective.attention_mode())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "name" => self.name = v.into(),
            "objective" => self.objective = v.parse()?,
            "mask_ratio" => self.mask_ratio = parse(key, v)?,
            "exclude_masked_targets" => self.exclude_masked_targets = parse(key, v)?,
            "schedule" => self.schedule = v.parse().map_err(|e| Error::Config(format!("{e}")))?,
            "n_mc" => self.n_mc = parse(key, v)?,
            "normalize" => self.normalize = v.parse()?,
            "importance_sampling" => self.importance_sampling = parse(key, v)?,
            "t_eps" => self.t_eps = parse(key, v)?,
            "ensure_masked" => self.ensure_masked = parse(key, v)?,
            "peak_lr" => self.peak_lr = parse(key, v)?,
            "final_lr" => self.final_lr = parse(key, v)?,
            "warmup_steps" => self.warmup_steps = parse(key, v)?,
            "decay_fraction" => self.decay_fraction = parse(key, v)?,
            "total_steps" => self.total_steps = parse(key, v)?,
            "weight_decay" => self.weight_decay = parse(key, v)?,
            "grad_clip" => self.grad_clip = parse(key, v)?,
            "beta1" => self.beta1 = parse(key, v)?,
            "beta2" => self.beta2 = parse(key, v)?,
            "adam_eps" => self.adam_eps = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "unique_tokens" => self.unique_tokens = parse(key, v)?,
            "total_tokens" => self.total_tokens = parse(key, v)?,
            "train_path" => self.train_path = path(v),
            "val_path" => self.val_path = path(v),
            "cloze_path" => self.cloze_path = path(v),
            "tier" => self.tier = v.into(),
            "eval_every" => self.eval_every = parse(key, v)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, v)?,
            "val_windows" => self.val_windows = parse(key, v)?,
            "rotate_val" => self.rotate_val = parse(key, v)?,
            "cloze_items" => self.cloze_items = parse(key, v)?,
            "scoring_t_grid" => {
                self.scoring_t_grid = v.split(',').map(|x| parse(key, x.trim())).collect::<Result<_>>()?;
            }
            "scoring_draws" => self.scoring_draws = parse(key, v)?,
            "eval_seed" => self.eval_seed = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "stop_after" => self.stop_after = parse(key, v)?,
            "dropout_prob" => self.model.set("dropout", v).map_err(|e| Error::Config(e.to_string()))?,
            k if MODEL_KEYS.contains(&k) => self.model.set(k, v).map_err(|e| Error::Config(e.to_string()))?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Flat text: one `key=value` per line, `#` comments, blank lines ignored.
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut c = TrainConfig::default();
        c.apply_kv(text)?;
        Ok(c)
    }

    pub fn apply_kv(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Config(format!("line {}: expected key=value", n + 1)))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    /// A flat JSON object with string, number or boolean values.
    pub fn from_json(text: &str) -> Result<Self> {
        let map: serde_json::Map<String, serde_json::Value> = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let mut c = TrainConfig::default();
        for (k, v) in map {
            let s = match v {
                serde_json::Value::String(s) => s,
                serde_json::Value::Number(n) => n.to_string(),
                serde_json::Value::Bool(b) => b.to_string(),
                other => return Err(Error::Config(format!("{k}: unsupported value {other}"))),
            };
            c.set(&k, &s)?;
        }
        Ok(c)
    }

    /// JSON if the text starts with `{`, `key=value` otherwise.
    pub fn parse_any(text: &str) -> Result<Self> {
        if text.trim_start().starts_with('{') {
            Self::from_json(text)
        } else {
            Self::from_kv(text)
        }
    }

    pub fn to_kv(&self) -> String {
        let m = &self.model;
        let grid: Vec<String> = self.scoring_t_grid.iter().map(f64::to_string).collect();
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k}={v}");
        };
        put("name", self.name.clone());
        put("objective", self.objective.to_string());
        put("mask_ratio", self.mask_ratio.to_string());
        put("exclude_masked_targets", self.exclude_masked_targets.to_string());
        put("vocab_size", m.vocab_size.to_string());
        put("seq_len", m.seq_len.to_string());
        put("n_layers", m.n_layers.to_string());
        put("d_model", m.d_model.to_string());
        put("n_heads", m.n_heads.to_string());
        put("ffn_mult", m.ffn_mult.to_string());
        put("dropout", m.dropout_prob.to_string());
        put("init_std", m.init_std.to_string());
        put("rope_base", m.rope_base.to_string());
        put("qk_norm", m.qk_norm.to_string());
        put("bias_free", m.bias_free.to_string());
        put("schedule", self.schedule.to_string());
        put("n_mc", self.n_mc.to_string());
        put("normalize", self.normalize.to_string());
        put("importance_sampling", self.importance_sampling.to_string());
        put("t_eps", self.t_eps.to_string());
        put("ensure_masked", self.ensure_masked.to_string());
        put("peak_lr", self.peak_lr.to_string());
        put("final_lr", self.final_lr.to_string());
        put("warmup_steps", self.warmup_steps.to_string());
        put("decay_fraction", self.decay_fraction.to_string());
        put("total_steps", self.total_steps.to_string());
        put("weight_decay", self.weight_decay.to_string());
        put("grad_clip", self.grad_clip.to_string());
        put("beta1", self.beta1.to_string());
        put("beta2", self.beta2.to_string());
        put("adam_eps", self.adam_eps.to_string());
        put("batch_size", self.batch_size.to_string());
        put("unique_tokens", self.unique_tokens.to_string());
        put("total_tokens", self.total_tokens.to_string());
        put("train_path", show_path(&self.train_path));
        put("val_path", show_path(&self.val_path));
        put("cloze_path", show_path(&self.cloze_path));
        put("tier", self.tier.clone());
        put("eval_every", self.eval_every.to_string());
        put("checkpoint_every", self.checkpoint_every.to_string());
        put("val_windows", self.val_windows.to_string());
        put("rotate_val", self.rotate_val.to_string());
        put("cloze_items", self.cloze_items.to_string());
        put("scoring_t_grid", grid.join(","));
        put("scoring_draws", self.scoring_draws.to_string());
        put("eval_seed", self.eval_seed.to_string());
        put("seed", self.seed.to_string());
        put("stop_after", self.stop_after.to_string());
        s
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return bad(format!("mask_ratio {} outside [0, 1)", self.mask_ratio));
        }
        if self.mask_ratio > 0.0 && self.objective != ObjectiveKind::ArInputNoise {
            return bad("mask_ratio only applies to objective=ar+input_noise".into());
        }
        if self.batch_size == 0 || self.n_mc == 0 || self.eval_every == 0 {
            return bad("batch_size, n_mc and eval_every must be positive".into());
        }
        if !(self.t_eps > 0.0 && self.t_eps < 1.0) {
            return bad(format!("t_eps {} outside (0, 1)", self.t_eps));
        }
        if self.unique_tokens > self.total_tokens {
            return bad(format!("unique_tokens {} exceeds total_tokens {}", self.unique_tokens, self.total_tokens));
        }
        if self.scoring_t_grid.iter().any(|&t| !(t > 0.0 && t <= 1.0)) || self.scoring_draws == 0 {
            return bad("scoring grid must lie in (0, 1] with at least one draw".into());
        }
        self.model_spec().validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }
}

impl PartialEq for TrainConfig {
    fn eq(&self, other: &Self) -> bool {
        self.to_kv() == other.to_kv()
    }
}
