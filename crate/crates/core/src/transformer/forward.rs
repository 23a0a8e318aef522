use super::{AttentionMode, Model, ModelError, Result};
use crate::tensor::{AttnGeom, Graph, Rng, Scalar, Tensor, Var};
use crate::Token;

impl<T: Scalar> Model<T> {
    /// Registers every parameter as a leaf of `g`, in declaration order.
    pub fn bind<'a>(&'a self, g: &mut Graph<'a, T>, trainable: bool) -> Vec<Var> {
        self.params.iter().map(|p| g.leaf_as(p, trainable)).collect()
    }

    /// Builds the forward pass on `g` and returns logits `[batch*len, K]`.
    ///
    /// `tokens` holds `batch` rows of equal length `len <= seq_len`. Dropout
    /// is applied only when `dropout` is given and the spec's probability
    /// is positive.
    pub fn forward_graph<'a>(
        &'a self,
        g: &mut Graph<'a, T>,
        params: &[Var],
        tokens: &[Token],
        batch: usize,
        mode: AttentionMode,
        mut dropout: Option<&mut Rng>,
    ) -> Result<Var> {
        let spec = &self.spec;
        if batch == 0 || tokens.len() % batch != 0 || tokens.is_empty() {
            return Err(ModelError::InvalidSpec(format!("{} tokens cannot form {batch} equal rows", tokens.len())));
        }
        let len = tokens.len() / batch;
        if len > spec.seq_len {
            return Err(ModelError::ContextOverflow {
                len,
                capacity: spec.seq_len,
            });
        }
        self.check_tokens(tokens)?;
        let p_drop = if dropout.is_some() { spec.dropout_prob } else { 0.0 };
        let dh = spec.head_dim();
        let geom = AttnGeom {
            batch,
            seq_len: len,
            n_heads: spec.n_heads,
            head_dim: dh,
            causal: mode == AttentionMode::Causal,
        };
        let lay = &self.layout;
        let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let mut x = g.embedding(params[lay.embed], &ids)?;
        for lp in &lay.layers {
            let b = lp.biases.map(|ix| ix.map(|i| params[i]));
            let linear = |g: &mut Graph<'a, T>, x: Var, w: usize, bias: Option<Var>| -> Result<Var> {
                let y = g.matmul(x, params[w])?;
                Ok(match bias {
                    Some(bv) => g.add_row(y, bv)?,
                    None => y,
                })
            };
            let h = g.rms_norm(x, params[lp.attn_norm])?;
            let mut q = linear(g, h, lp.wq, b.map(|b| b[0]))?;
            let mut k = linear(g, h, lp.wk, b.map(|b| b[1]))?;
            let v = linear(g, h, lp.wv, b.map(|b| b[2]))?;
            if let Some((qn, kn)) = lp.qk_norm {
                q = g.rms_norm(q, params[qn])?;
                k = g.rms_norm(k, params[kn])?;
            }
            let q = g.rope(q, dh, len, spec.rope_base)?;
            let k = g.rope(k, dh, len, spec.rope_base)?;
            let attn_drop = match dropout.as_deref_mut() {
                Some(r) if p_drop > 0.0 => Some((p_drop, r)),
                _ => None,
            };
            let a = g.attention(q, k, v, geom, attn_drop)?;
            let mut o = linear(g, a, lp.wo, b.map(|b| b[3]))?;
            if let Some(r) = dropout.as_deref_mut() {
                o = g.dropout(o, p_drop, r);
            }
            x = g.add(x, o)?;

            let h = g.rms_norm(x, params[lp.ffn_norm])?;
            let gate = linear(g, h, lp.w_gate, b.map(|b| b[4]))?;
            let up = linear(g, h, lp.w_up, b.map(|b| b[5]))?;
            let s = g.swiglu(gate, up)?;
            let mut f = linear(g, s, lp.w_down, b.map(|b| b[6]))?;
            if let Some(r) = dropout.as_deref_mut() {
                f = g.dropout(f, p_drop, r);
            }
            x = g.add(x, f)?;
        }
        let x = g.rms_norm(x, params[lay.final_norm])?;
        Ok(g.matmul(x, params[lay.lm_head])?)
    }

    /// Logits `[batch, len, K]` for `batch` equal-length rows of `tokens`.
    pub fn forward(&self, tokens: &[Token], batch: usize, mode: AttentionMode, dropout_on: bool, rng: &mut Rng) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let params = self.bind(&mut g, false);
        let out = self.forward_graph(&mut g, &params, tokens, batch, mode, dropout_on.then_some(rng))?;
        let len = tokens.len() / batch;
        Ok(g.value(out).clone().reshape([batch, len, self.spec.vocab_size])?)
    }

    /// Dropout-free logits in the model's own attention mode.
    pub fn logits(&self, tokens: &[Token], batch: usize) -> Result<Tensor<T>> {
        let mut unused = Rng::new(0);
        self.forward(tokens, batch, self.spec.attention_mode, false, &mut unused)
    }
}
