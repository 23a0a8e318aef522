use super::{AttentionMode, Model, ModelError, Result};
use crate::tensor::graph_kernels::{attention_apply, attention_scores};
use crate::tensor::kernels::{self, RopeTable, View};
use crate::tensor::Scalar;
use crate::Token;

/// Per-layer keys and values for positions `0..len` of one decoding episode.
#[derive(Clone, Debug)]
pub struct KvCache<T: Scalar = f32> {
    keys: Vec<Vec<T>>,
    values: Vec<Vec<T>>,
    capacity: usize,
    len: usize,
}

impl<T: Scalar> KvCache<T> {
    pub fn new(model: &Model<T>) -> Self {
        let spec = model.spec();
        let size = spec.seq_len * spec.d_model;
        KvCache {
            keys: vec![vec![T::zero(); size]; spec.n_layers],
            values: vec![vec![T::zero(); size]; spec.n_layers],
            capacity: spec.seq_len,
            len: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn clear(&mut self) {
        self.len = 0;
    }
}

impl<T: Scalar> Model<T> {
    /// Consumes `token` at position `cache.len()` and returns its logits.
    /// Reproduces the corresponding row of a full causal forward.
    pub fn forward_incremental(&self, token: Token, cache: &mut KvCache<T>) -> Result<Vec<T>> {
        self.require_mode(AttentionMode::Causal)?;
        self.check_tokens(&[token])?;
        if cache.len >= cache.capacity {
            return Err(ModelError::ContextOverflow {
                len: cache.len + 1,
                capacity: cache.capacity,
            });
        }
        let spec = &self.spec;
        let (d, dh, hidden) = (spec.d_model, spec.head_dim(), spec.ffn_hidden());
        let pos = cache.len;
        let p = |i: usize| self.params[i].data();
        let lay = &self.layout;
        let rope = RopeTable::<T>::new(pos, 1, dh, spec.rope_base);
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let mut one = [T::zero()];

        let t = token as usize;
        let mut x = p(lay.embed)[t * d..(t + 1) * d].to_vec();
        let mut scores = vec![T::zero(); pos + 1];
        for (li, lp) in lay.layers.iter().enumerate() {
            let bias = |j: usize| lp.biases.map(|b| p(b[j]));
            let linear = |x: &[T], w: usize, k: usize, n: usize, b: Option<&[T]>| {
                let mut y = kernels::matmul(x, p(w), 1, k, n);
                if let Some(b) = b {
                    y.iter_mut().zip(b).for_each(|(a, &c)| *a = *a + c);
                }
                y
            };
            let mut h = vec![T::zero(); d];
            kernels::rms_norm(&x, p(lp.attn_norm), d, &mut h, &mut one);
            let mut q = linear(&h, lp.wq, d, d, bias(0));
            let mut k = linear(&h, lp.wk, d, d, bias(1));
            let v = linear(&h, lp.wv, d, d, bias(2));
            if let Some((qn, kn)) = lp.qk_norm {
                let mut inv = vec![T::zero(); spec.n_heads];
                let src = q.clone();
                kernels::rms_norm(&src, p(qn), dh, &mut q, &mut inv);
                let src = k.clone();
                kernels::rms_norm(&src, p(kn), dh, &mut k, &mut inv);
            }
            kernels::rope_in_place(&mut q, d, dh, &rope, |_| 0, false);
            kernels::rope_in_place(&mut k, d, dh, &rope, |_| 0, false);
            cache.keys[li][pos * d..(pos + 1) * d].copy_from_slice(&k);
            cache.values[li][pos * d..(pos + 1) * d].copy_from_slice(&v);

            let mut a = vec![T::zero(); d];
            for head in 0..spec.n_heads {
                let hv = View { off: head * dh, rs: d, cs: 1 };
                attention_scores(&q, hv, &cache.keys[li], hv, 1, pos + 1, dh, scale, &mut scores);
                kernels::softmax_in_place(&mut scores);
                attention_apply(&scores, &cache.values[li], hv, 1, pos + 1, dh, &mut a, hv);
            }
            let o = linear(&a, lp.wo, d, d, bias(3));
            x.iter_mut().zip(&o).for_each(|(a, &b)| *a = *a + b);

            kernels::rms_norm(&x, p(lp.ffn_norm), d, &mut h, &mut one);
            let gate = linear(&h, lp.w_gate, d, hidden, bias(4));
            let up = linear(&h, lp.w_up, d, hidden, bias(5));
            let s: Vec<T> = gate.iter().zip(&up).map(|(&g, &u)| kernels::silu(g) * u).collect();
            let f = linear(&s, lp.w_down, hidden, d, bias(6));
            x.iter_mut().zip(&f).for_each(|(a, &b)| *a = *a + b);
        }
        let mut h = vec![T::zero(); d];
        kernels::rms_norm(&x, p(lay.final_norm), d, &mut h, &mut one);
        cache.len += 1;
        Ok(kernels::matmul(&h, p(lay.lm_head), 1, d, spec.vocab_size))
    }
}
