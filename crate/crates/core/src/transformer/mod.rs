//! Decoder-style transformer shared by both paradigms: causal attention for
//! the autoregressive model, bidirectional attention for the diffusion
//! denoiser. Pre-layer RMSNorm, RoPE, SwiGLU, optional qk-norm, no biases
//! by default, and no time/noise-level input anywhere.

mod cache;
pub mod checkpoint;
mod forward;

pub use cache::KvCache;

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::tensor::{Rng, Scalar, Tensor, TensorError};
use crate::Token;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("token {token} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { token: Token, vocab: usize },
    #[error("operation requires {expected} attention, model is {actual}")]
    WrongMode {
        expected: AttentionMode,
        actual: AttentionMode,
    },
    #[error("sequence of {len} tokens exceeds context of {capacity}")]
    ContextOverflow { len: usize, capacity: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AttentionMode {
    Causal,
    Bidirectional,
}

impl fmt::Display for AttentionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttentionMode::Causal => "causal",
            AttentionMode::Bidirectional => "bidirectional",
        })
    }
}

impl FromStr for AttentionMode {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "causal" => Ok(AttentionMode::Causal),
            "bidirectional" => Ok(AttentionMode::Bidirectional),
            other => Err(ModelError::InvalidSpec(format!("unknown attention mode {other:?}"))),
        }
    }
}

/// Transformer hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    /// Vocabulary size, including the mask symbol.
    pub vocab_size: usize,
    pub mask_token: Token,
    /// Maximum context length.
    pub seq_len: usize,
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    /// SwiGLU hidden width as a multiple of `d_model` (rounded up to a multiple of 8).
    pub ffn_mult: f64,
    pub attention_mode: AttentionMode,
    pub dropout_prob: f64,
    pub init_std: f64,
    pub rope_base: f64,
    pub qk_norm: bool,
    pub bias_free: bool,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            vocab_size: crate::data::VOCAB_SIZE,
            mask_token: crate::data::MASK,
            seq_len: 256,
            n_layers: 4,
            d_model: 128,
            n_heads: 4,
            ffn_mult: 8.0 / 3.0,
            attention_mode: AttentionMode::Causal,
            dropout_prob: 0.0,
            init_std: 0.02,
            rope_base: 10000.0,
            qk_norm: true,
            bias_free: true,
        }
    }
}

impl ModelSpec {
    /// A 1B-class shape (GPT-2-sized vocabulary plus mask, 4096 context),
    /// used for FLOPs accounting at paper scale.
    pub fn billion_scale() -> Self {
        ModelSpec {
            vocab_size: 50258,
            mask_token: 50257,
            seq_len: 4096,
            n_layers: 16,
            d_model: 2048,
            n_heads: 16,
            ffn_mult: 2.75,
            ..ModelSpec::default()
        }
    }

    pub fn with_mode(mut self, mode: AttentionMode) -> Self {
        self.attention_mode = mode;
        self
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads.max(1)
    }

    pub fn ffn_hidden(&self) -> usize {
        let raw = (self.ffn_mult * self.d_model as f64).ceil() as usize;
        raw.div_ceil(8) * 8
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ModelError::InvalidSpec(m));
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.head_dim() % 2 != 0 {
            return bad(format!("head_dim {} must be even for rotary embeddings", self.head_dim()));
        }
        if (self.mask_token as usize) >= self.vocab_size {
            return bad(format!("mask token {} outside vocabulary {}", self.mask_token, self.vocab_size));
        }
        if !(0.0..1.0).contains(&self.dropout_prob) {
            return bad(format!("dropout_prob {} not in [0,1)", self.dropout_prob));
        }
        if self.init_std.is_nan() || self.init_std < 0.0 {
            return bad(format!("init_std {} must be non-negative", self.init_std));
        }
        if self.seq_len == 0 || self.ffn_mult <= 0.0 || self.rope_base <= 0.0 {
            return bad("seq_len, ffn_mult and rope_base must be positive".into());
        }
        Ok(())
    }

    /// `key=value` lines, one per field, in a fixed order.
    pub fn to_kv(&self) -> String {
        format!(
            "vocab_size={}\nmask_token={}\nseq_len={}\nn_layers={}\nd_model={}\nn_heads={}\nffn_mult={}\nattention_mode={}\ndropout_prob={}\ninit_std={}\nrope_base={}\nqk_norm={}\nbias_free={}\n",
            self.vocab_size,
            self.mask_token,
            self.seq_len,
            self.n_layers,
            self.d_model,
            self.n_heads,
            self.ffn_mult,
            self.attention_mode,
            self.dropout_prob,
            self.init_std,
            self.rope_base,
            self.qk_norm,
            self.bias_free
        )
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut spec = ModelSpec::default();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| ModelError::InvalidSpec(format!("malformed line {line:?}")))?;
            spec.set(k.trim(), v.trim())?;
        }
        spec.validate()?;
        Ok(spec)
    }

    /// Sets one field from its string form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn p<F: FromStr>(k: &str, v: &str) -> Result<F> {
            v.parse().map_err(|_| ModelError::InvalidSpec(format!("bad value {v:?} for {k}")))
        }
        match key {
            "vocab_size" => self.vocab_size = p(key, value)?,
            "mask_token" => self.mask_token = p(key, value)?,
            "seq_len" => self.seq_len = p(key, value)?,
            "n_layers" => self.n_layers = p(key, value)?,
            "d_model" => self.d_model = p(key, value)?,
            "n_heads" => self.n_heads = p(key, value)?,
            "ffn_mult" => self.ffn_mult = p(key, value)?,
            "attention_mode" => self.attention_mode = value.parse()?,
            "dropout_prob" | "dropout" => self.dropout_prob = p(key, value)?,
            "init_std" => self.init_std = p(key, value)?,
            "rope_base" => self.rope_base = p(key, value)?,
            "qk_norm" => self.qk_norm = p(key, value)?,
            "bias_free" => self.bias_free = p(key, value)?,
            other => return Err(ModelError::InvalidSpec(format!("unknown model key {other:?}"))),
        }
        Ok(())
    }
}

/// Parameter indices of one transformer block.
#[derive(Clone, Debug)]
pub(crate) struct LayerParams {
    attn_norm: usize,
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
    qk_norm: Option<(usize, usize)>,
    ffn_norm: usize,
    w_gate: usize,
    w_up: usize,
    w_down: usize,
    /// `bq, bk, bv, bo, b_gate, b_up, b_down` when biases are enabled.
    biases: Option<[usize; 7]>,
}

#[derive(Clone, Debug)]
pub(crate) struct Layout {
    embed: usize,
    layers: Vec<LayerParams>,
    final_norm: usize,
    lm_head: usize,
}

/// A transformer with its parameters, stored in declaration order.
#[derive(Clone, Debug)]
pub struct Model<T: Scalar = f32> {
    spec: ModelSpec,
    names: Vec<String>,
    params: Vec<Tensor<T>>,
    layout: Layout,
}

enum Init {
    Normal,
    Ones,
    Zeros,
}

impl<T: Scalar> Model<T> {
    /// Fresh model: weight matrices ~ N(0, init_std²) drawn in declaration
    /// order from `seed`; norm scales 1; biases (if any) 0.
    pub fn init(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = Rng::new(seed);
        let mut names = Vec::new();
        let mut params = Vec::new();
        let (d, k, h, dh) = (spec.d_model, spec.vocab_size, spec.ffn_hidden(), spec.head_dim());
        let std = spec.init_std;
        let mut add = |name: String, shape: Vec<usize>, init: Init| -> usize {
            let n: usize = shape.iter().product();
            let data: Vec<T> = match init {
                Init::Normal => (0..n).map(|_| T::from_f64(rng.normal() * std)).collect(),
                Init::Ones => vec![T::one(); n],
                Init::Zeros => vec![T::zero(); n],
            };
            names.push(name);
            params.push(Tensor::new(shape, data).expect("shape matches data"));
            params.len() - 1
        };
        let embed = add("embed".into(), vec![k, d], Init::Normal);
        let mut layers = Vec::with_capacity(spec.n_layers);
        for l in 0..spec.n_layers {
            let n = |s: &str| format!("layers.{l}.{s}");
            let attn_norm = add(n("attn_norm"), vec![d], Init::Ones);
            let wq = add(n("wq"), vec![d, d], Init::Normal);
            let wk = add(n("wk"), vec![d, d], Init::Normal);
            let wv = add(n("wv"), vec![d, d], Init::Normal);
            let wo = add(n("wo"), vec![d, d], Init::Normal);
            let qk_norm = spec.qk_norm.then(|| (add(n("q_norm"), vec![dh], Init::Ones), add(n("k_norm"), vec![dh], Init::Ones)));
            let ffn_norm = add(n("ffn_norm"), vec![d], Init::Ones);
            let w_gate = add(n("w_gate"), vec![d, h], Init::Normal);
            let w_up = add(n("w_up"), vec![d, h], Init::Normal);
            let w_down = add(n("w_down"), vec![h, d], Init::Normal);
            let biases = (!spec.bias_free).then(|| {
                [
                    add(n("bq"), vec![d], Init::Zeros),
                    add(n("bk"), vec![d], Init::Zeros),
                    add(n("bv"), vec![d], Init::Zeros),
                    add(n("bo"), vec![d], Init::Zeros),
                    add(n("b_gate"), vec![h], Init::Zeros),
                    add(n("b_up"), vec![h], Init::Zeros),
                    add(n("b_down"), vec![d], Init::Zeros),
                ]
            });
            layers.push(LayerParams {
                attn_norm,
                wq,
                wk,
                wv,
                wo,
                qk_norm,
                ffn_norm,
                w_gate,
                w_up,
                w_down,
                biases,
            });
        }
        let final_norm = add("final_norm".into(), vec![d], Init::Ones);
        let lm_head = add("lm_head".into(), vec![d, k], Init::Normal);
        Ok(Model {
            spec,
            names,
            params,
            layout: Layout {
                embed,
                layers,
                final_norm,
                lm_head,
            },
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn mode(&self) -> AttentionMode {
        self.spec.attention_mode
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn n_params(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    /// Same weights in another precision.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            spec: self.spec.clone(),
            names: self.names.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
            layout: self.layout.clone(),
        }
    }

    /// Replaces all parameters; shapes must match.
    pub fn set_params(&mut self, params: Vec<Tensor<T>>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(ModelError::Checkpoint(format!("expected {} tensors, got {}", self.params.len(), params.len())));
        }
        for (i, (new, old)) in params.iter().zip(&self.params).enumerate() {
            if new.shape() != old.shape() {
                return Err(ModelError::Checkpoint(format!(
                    "{}: shape {:?} does not match {:?}",
                    self.names[i],
                    new.shape(),
                    old.shape()
                )));
            }
        }
        self.params = params;
        Ok(())
    }

    pub(crate) fn check_tokens(&self, tokens: &[Token]) -> Result<()> {
        match tokens.iter().find(|&&t| t as usize >= self.spec.vocab_size) {
            Some(&token) => Err(ModelError::TokenOutOfRange {
                token,
                vocab: self.spec.vocab_size,
            }),
            None => Ok(()),
        }
    }

    pub(crate) fn require_mode(&self, expected: AttentionMode) -> Result<()> {
        if self.spec.attention_mode != expected {
            return Err(ModelError::WrongMode {
                expected,
                actual: self.spec.attention_mode,
            });
        }
        Ok(())
    }
}
