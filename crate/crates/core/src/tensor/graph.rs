use std::borrow::Cow;

use super::kernels::{self, RopeTable, View};
use super::{Result, Rng, Scalar, Tensor, TensorError};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Layout of a fused attention call. `q`, `k`, `v` are `[batch*seq_len, n_heads*head_dim]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttnGeom {
    pub batch: usize,
    pub seq_len: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub causal: bool,
}

impl AttnGeom {
    fn width(&self) -> usize {
        self.n_heads * self.head_dim
    }
}

enum MatMulKind {
    /// `[M,k] @ [k,n]`, leading dims of the lhs flattened into M.
    Shared { m: usize, k: usize, n: usize },
    /// `[B,m,k] @ [B,k,n]`.
    Batched { b: usize, m: usize, k: usize, n: usize },
}

enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, kind: MatMulKind },
    Add(Var, Var),
    AddRow { x: Var, bias: Var },
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    Reshape(Var),
    Embedding { table: Var, ids: Vec<usize> },
    RmsNorm { x: Var, w: Var, inv: Vec<T> },
    Rope { x: Var, head_dim: usize, seq_len: usize, table: RopeTable<T> },
    Attention { q: Var, k: Var, v: Var, geom: AttnGeom, probs: Vec<T>, keep: Option<Vec<T>> },
    SwiGlu { gate: Var, up: Var },
    Dropout { x: Var, keep: Vec<T> },
    WeightedNll { logits: Var, targets: Vec<usize>, weights: Vec<T>, probs: Vec<T> },
}

struct Node<'a, T: Scalar> {
    value: Cow<'a, Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
}

/// Records operations in creation order (which is a topological order) and
/// replays them in reverse for gradients.
pub struct Graph<'a, T: Scalar = f32> {
    nodes: Vec<Node<'a, T>>,
}

/// Gradients of the requires-grad leaves reached by a backward pass.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for `v`; `None` if the leaf was unreachable or not trainable.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

impl<T: Scalar> Default for Graph<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a, T: Scalar> Graph<'a, T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'a, Tensor<T>>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn push_owned(&mut self, shape: Vec<usize>, data: Vec<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        let t = Tensor {
            shape,
            data,
            requires_grad: false,
        };
        self.push(Cow::Owned(t), op, needs_grad)
    }

    /// Borrowed leaf; trainable iff the tensor has `requires_grad` set.
    pub fn leaf(&mut self, t: &'a Tensor<T>) -> Var {
        let rg = t.requires_grad;
        self.push(Cow::Borrowed(t), Op::Leaf, rg)
    }

    /// Borrowed leaf with an explicit trainability flag.
    pub fn leaf_as(&mut self, t: &'a Tensor<T>, requires_grad: bool) -> Var {
        self.push(Cow::Borrowed(t), Op::Leaf, requires_grad)
    }

    pub fn leaf_owned(&mut self, t: Tensor<T>) -> Var {
        let rg = t.requires_grad;
        self.push(Cow::Owned(t), Op::Leaf, rg)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    fn data(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value.data
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch("matmul", &sa, &sb));
        }
        let k = sa[sa.len() - 1];
        if sb.len() == 2 {
            if sb[0] != k {
                return Err(mismatch("matmul", &sa, &sb));
            }
            let m: usize = sa[..sa.len() - 1].iter().product();
            let n = sb[1];
            let out = kernels::matmul(self.data(a), self.data(b), m, k, n);
            let mut shape = sa[..sa.len() - 1].to_vec();
            shape.push(n);
            return Ok(self.push_owned(shape, out, Op::MatMul { a, b, kind: MatMulKind::Shared { m, k, n } }, &[a, b]));
        }
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sb[1] != k {
            return Err(mismatch("matmul", &sa, &sb));
        }
        let (bt, m, n) = (sa[0], sa[1], sb[2]);
        let mut out = vec![T::zero(); bt * m * n];
        for i in 0..bt {
            kernels::gemm(
                m,
                k,
                n,
                T::one(),
                self.data(a),
                View::row_major(i * m * k, k),
                self.data(b),
                View::row_major(i * k * n, n),
                T::zero(),
                &mut out,
                View::row_major(i * m * n, n),
            );
        }
        Ok(self.push_owned(vec![bt, m, n], out, Op::MatMul { a, b, kind: MatMulKind::Batched { b: bt, m, k, n } }, &[a, b]))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x + y).collect();
        Ok(self.push_owned(self.shape(a).to_vec(), out, Op::Add(a, b), &[a, b]))
    }

    /// `x[.., n] + bias[n]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, cols) = self.value(x).rows_cols();
        if self.shape(bias) != [cols] {
            return Err(mismatch("add_row", self.shape(x), self.shape(bias)));
        }
        let b = self.data(bias);
        let out = self.data(x).chunks_exact(cols).flat_map(|r| r.iter().zip(b).map(|(&p, &q)| p + q)).collect();
        Ok(self.push_owned(self.shape(x).to_vec(), out, Op::AddRow { x, bias }, &[x, bias]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x * y).collect();
        Ok(self.push_owned(self.shape(a).to_vec(), out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let out = self.data(a).iter().map(|&x| x * c).collect();
        self.push_owned(self.shape(a).to_vec(), out, Op::Scale(a, c), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().copied().sum();
        self.push_owned(vec![], vec![s], Op::Sum(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.value(a).numel() {
            return Err(mismatch("reshape", self.shape(a), &shape));
        }
        let data = self.data(a).to_vec();
        Ok(self.push_owned(shape, data, Op::Reshape(a), &[a]))
    }

    /// Gathers rows of a `[V, d]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let st = self.shape(table).to_vec();
        if st.len() != 2 {
            return Err(mismatch("embedding", &st, &[ids.len()]));
        }
        let (vocab, d) = (st[0], st[1]);
        let src = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(TensorError::IndexOutOfRange {
                    op: "embedding",
                    index: id,
                    extent: vocab,
                });
            }
            out.extend_from_slice(&src[id * d..(id + 1) * d]);
        }
        Ok(self.push_owned(vec![ids.len(), d], out, Op::Embedding { table, ids: ids.to_vec() }, &[table]))
    }

    /// RMS normalization over trailing groups of `w.len()` elements.
    pub fn rms_norm(&mut self, x: Var, w: Var) -> Result<Var> {
        let group = self.value(w).numel();
        if self.shape(w).len() != 1 || group == 0 || self.value(x).numel() % group != 0 {
            return Err(mismatch("rms_norm", self.shape(x), self.shape(w)));
        }
        let n = self.value(x).numel();
        let mut y = vec![T::zero(); n];
        let mut inv = vec![T::zero(); n / group];
        kernels::rms_norm(self.data(x), self.data(w), group, &mut y, &mut inv);
        Ok(self.push_owned(self.shape(x).to_vec(), y, Op::RmsNorm { x, w, inv }, &[x, w]))
    }

    /// Rotary position embedding on `[rows, width]` with row `r` at
    /// position `r % seq_len`.
    pub fn rope(&mut self, x: Var, head_dim: usize, seq_len: usize, base: f64) -> Result<Var> {
        let (rows, width) = self.value(x).rows_cols();
        if head_dim == 0 || head_dim % 2 != 0 || width % head_dim != 0 || seq_len == 0 || rows % seq_len != 0 {
            return Err(TensorError::Invalid(format!(
                "rope: width {width}, head_dim {head_dim}, rows {rows}, seq_len {seq_len}"
            )));
        }
        let table = RopeTable::new(0, seq_len, head_dim, base);
        let mut y = self.data(x).to_vec();
        kernels::rope_in_place(&mut y, width, head_dim, &table, |r| r % seq_len, false);
        Ok(self.push_owned(self.shape(x).to_vec(), y, Op::Rope { x, head_dim, seq_len, table }, &[x]))
    }

    /// Fused scaled-dot-product attention with optional dropout on the
    /// attention weights.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, geom: AttnGeom, dropout: Option<(f64, &mut Rng)>) -> Result<Var> {
        let expect = [geom.batch * geom.seq_len, geom.width()];
        for x in [q, k, v] {
            if self.value(x).rows_cols() != (expect[0], expect[1]) {
                return Err(mismatch("attention", self.shape(x), &expect));
            }
        }
        let AttnGeom { batch, seq_len: l, n_heads, head_dim: dh, causal } = geom;
        let d = geom.width();
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let mut probs = vec![T::zero(); batch * n_heads * l * l];
        let mut out = vec![T::zero(); batch * l * d];
        let mut dropout = dropout.filter(|(p, _)| *p > 0.0);
        let mut keep: Option<Vec<T>> = dropout.as_ref().map(|_| vec![T::zero(); probs.len()]);
        let mut dropped = vec![T::zero(); if dropout.is_some() { l * l } else { 0 }];
        let (qd, kd, vd) = (self.data(q), self.data(k), self.data(v));
        for b in 0..batch {
            for h in 0..n_heads {
                let base = b * l * d + h * dh;
                let pofs = (b * n_heads + h) * l * l;
                let p = &mut probs[pofs..pofs + l * l];
                let hv = View { off: base, rs: d, cs: 1 };
                attention_scores(qd, hv, kd, hv, l, l, dh, scale, p);
                for i in 0..l {
                    let row = &mut p[i * l..(i + 1) * l];
                    if causal {
                        kernels::softmax_in_place(&mut row[..=i]);
                        row[i + 1..].iter_mut().for_each(|x| *x = T::zero());
                    } else {
                        kernels::softmax_in_place(row);
                    }
                }
                let weights: &[T] = match (&mut dropout, &mut keep) {
                    (Some((prob, rng)), Some(keep)) => {
                        let mult = T::from_f64(1.0 / (1.0 - *prob));
                        let kslice = &mut keep[pofs..pofs + l * l];
                        for ((kk, dst), &src) in kslice.iter_mut().zip(dropped.iter_mut()).zip(p.iter()) {
                            *kk = if rng.bernoulli(*prob) { T::zero() } else { mult };
                            *dst = src * *kk;
                        }
                        &dropped
                    }
                    _ => p,
                };
                attention_apply(weights, vd, hv, l, l, dh, &mut out, hv);
            }
        }
        let shape = self.shape(q).to_vec();
        Ok(self.push_owned(shape, out, Op::Attention { q, k, v, geom, probs, keep }, &[q, k, v]))
    }

    /// `silu(gate) * up`, elementwise.
    pub fn swiglu(&mut self, gate: Var, up: Var) -> Result<Var> {
        self.same_shape("swiglu", gate, up)?;
        let out = self.data(gate).iter().zip(self.data(up)).map(|(&g, &u)| kernels::silu(g) * u).collect();
        Ok(self.push_owned(self.shape(gate).to_vec(), out, Op::SwiGlu { gate, up }, &[gate, up]))
    }

    /// Inverted dropout; identity when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64, rng: &mut Rng) -> Var {
        if p <= 0.0 {
            return x;
        }
        let mult = T::from_f64(1.0 / (1.0 - p));
        let keep: Vec<T> = (0..self.value(x).numel()).map(|_| if rng.bernoulli(p) { T::zero() } else { mult }).collect();
        let out = self.data(x).iter().zip(&keep).map(|(&a, &k)| a * k).collect();
        self.push_owned(self.shape(x).to_vec(), out, Op::Dropout { x, keep }, &[x])
    }

    /// `sum_i weights[i] * -log softmax(logits[i])[targets[i]]` over rows
    /// whose target is not `ignore`.
    pub fn weighted_nll(&mut self, logits: Var, targets: &[usize], ignore: usize, weights: &[f64]) -> Result<Var> {
        let (rows, k) = self.value(logits).rows_cols();
        if targets.len() != rows || weights.len() != rows {
            return Err(mismatch("weighted_nll", self.shape(logits), &[targets.len()]));
        }
        let mut probs = self.data(logits).to_vec();
        let mut total = 0.0f64;
        for (i, row) in probs.chunks_exact_mut(k).enumerate() {
            let t = targets[i];
            if t == ignore {
                continue;
            }
            if t >= k {
                return Err(TensorError::IndexOutOfRange {
                    op: "weighted_nll",
                    index: t,
                    extent: k,
                });
            }
            let lse = kernels::log_sum_exp(row);
            total += weights[i] * (lse - row[t]).as_f64();
            kernels::softmax_in_place(row);
        }
        let w = weights.iter().map(|&x| T::from_f64(x)).collect();
        Ok(self.push_owned(
            vec![],
            vec![T::from_f64(total)],
            Op::WeightedNll {
                logits,
                targets: targets.to_vec(),
                weights: w,
                probs,
            },
            &[logits],
        ))
    }

    /// Mean cross-entropy over rows whose target differs from `ignore`,
    /// together with the number of contributing rows. With zero
    /// contributing rows the loss is a constant 0.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize], ignore: usize) -> Result<(Var, usize)> {
        let count = targets.iter().filter(|&&t| t != ignore).count();
        let w = if count == 0 { 0.0 } else { 1.0 / count as f64 };
        let weights = vec![w; targets.len()];
        Ok((self.weighted_nll(logits, targets, ignore, &weights)?, count))
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(TensorError::NotScalar(lt.shape.clone()));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        let mut out: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.backprop_node(node, &g, &mut grads);
            if matches!(node.op, Op::Leaf) {
                out[i] = Some(g);
            }
        }
        Ok(Gradients { grads: out })
    }

    fn backprop_node(&self, node: &Node<'a, T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let wants = |v: Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, kind } => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                match *kind {
                    MatMulKind::Shared { m, k, n } => {
                        if wants(*a) {
                            let da = self.grad_buf(grads, *a);
                            kernels::gemm(m, n, k, T::one(), g, View::row_major(0, n), bd, View::row_major(0, n).t(), T::one(), da, View::row_major(0, k));
                        }
                        if wants(*b) {
                            let db = self.grad_buf(grads, *b);
                            kernels::gemm(k, m, n, T::one(), ad, View::row_major(0, k).t(), g, View::row_major(0, n), T::one(), db, View::row_major(0, n));
                        }
                    }
                    MatMulKind::Batched { b: bt, m, k, n } => {
                        for i in 0..bt {
                            let (ao, bo, co) = (i * m * k, i * k * n, i * m * n);
                            if wants(*a) {
                                let da = self.grad_buf(grads, *a);
                                kernels::gemm(m, n, k, T::one(), g, View::row_major(co, n), bd, View::row_major(bo, n).t(), T::one(), da, View::row_major(ao, k));
                            }
                            if wants(*b) {
                                let db = self.grad_buf(grads, *b);
                                kernels::gemm(k, m, n, T::one(), ad, View::row_major(ao, k).t(), g, View::row_major(co, n), T::one(), db, View::row_major(bo, n));
                            }
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if wants(v) {
                        axpy(self.grad_buf(grads, v), g, T::one());
                    }
                }
            }
            Op::AddRow { x, bias } => {
                if wants(*x) {
                    axpy(self.grad_buf(grads, *x), g, T::one());
                }
                if wants(*bias) {
                    let db = self.grad_buf(grads, *bias);
                    let cols = db.len();
                    for row in g.chunks_exact(cols) {
                        axpy(db, row, T::one());
                    }
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    let other = self.data(*b).to_vec();
                    let da = self.grad_buf(grads, *a);
                    for ((d, &gi), &o) in da.iter_mut().zip(g).zip(&other) {
                        *d += gi * o;
                    }
                }
                if wants(*b) {
                    let other = self.data(*a).to_vec();
                    let db = self.grad_buf(grads, *b);
                    for ((d, &gi), &o) in db.iter_mut().zip(g).zip(&other) {
                        *d += gi * o;
                    }
                }
            }
            Op::Scale(a, c) => {
                if wants(*a) {
                    axpy(self.grad_buf(grads, *a), g, *c);
                }
            }
            Op::Sum(a) => {
                if wants(*a) {
                    let g0 = g[0];
                    self.grad_buf(grads, *a).iter_mut().for_each(|d| *d += g0);
                }
            }
            Op::Reshape(a) => {
                if wants(*a) {
                    axpy(self.grad_buf(grads, *a), g, T::one());
                }
            }
            Op::Embedding { table, ids } => {
                if wants(*table) {
                    let d = self.shape(*table)[1];
                    let dt = self.grad_buf(grads, *table);
                    for (r, &id) in ids.iter().enumerate() {
                        axpy(&mut dt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d], T::one());
                    }
                }
            }
            Op::RmsNorm { x, w, inv } => {
                let group = self.value(*w).numel();
                let (xd, wd) = (self.data(*x), self.data(*w));
                let mut dx = wants(*x).then(|| vec![T::zero(); xd.len()]);
                let mut dw = wants(*w).then(|| vec![T::zero(); group]);
                kernels::rms_norm_backward(xd, wd, inv, g, group, dx.as_deref_mut(), dw.as_deref_mut());
                if let Some(dx) = dx {
                    axpy(self.grad_buf(grads, *x), &dx, T::one());
                }
                if let Some(dw) = dw {
                    axpy(self.grad_buf(grads, *w), &dw, T::one());
                }
            }
            Op::Rope { x, head_dim, seq_len, table } => {
                if wants(*x) {
                    let (_, width) = self.value(*x).rows_cols();
                    let mut dx = g.to_vec();
                    let sl = *seq_len;
                    kernels::rope_in_place(&mut dx, width, *head_dim, table, |r| r % sl, true);
                    axpy(self.grad_buf(grads, *x), &dx, T::one());
                }
            }
            Op::Attention { q, k, v, geom, probs, keep } => {
                let (dq, dk, dv) = attention_backward(self.data(*q), self.data(*k), self.data(*v), g, *geom, probs, keep.as_deref());
                for (var, d) in [(*q, dq), (*k, dk), (*v, dv)] {
                    if wants(var) {
                        axpy(self.grad_buf(grads, var), &d, T::one());
                    }
                }
            }
            Op::SwiGlu { gate, up } => {
                let (gd, ud) = (self.data(*gate), self.data(*up));
                if wants(*gate) {
                    let dg: Vec<T> = gd
                        .iter()
                        .zip(ud)
                        .zip(g)
                        .map(|((&a, &u), &gi)| {
                            let s = kernels::sigmoid(a);
                            gi * u * s * (T::one() + a * (T::one() - s))
                        })
                        .collect();
                    axpy(self.grad_buf(grads, *gate), &dg, T::one());
                }
                if wants(*up) {
                    let du: Vec<T> = gd.iter().zip(g).map(|(&a, &gi)| gi * kernels::silu(a)).collect();
                    axpy(self.grad_buf(grads, *up), &du, T::one());
                }
            }
            Op::Dropout { x, keep } => {
                if wants(*x) {
                    let dx = self.grad_buf(grads, *x);
                    for ((d, &gi), &k) in dx.iter_mut().zip(g).zip(keep) {
                        *d += gi * k;
                    }
                }
            }
            Op::WeightedNll { logits, targets, weights, probs } => {
                if wants(*logits) {
                    let k = self.value(*logits).rows_cols().1;
                    let g0 = g[0];
                    let dl = self.grad_buf(grads, *logits);
                    let ignore_free = |t: usize| t < k;
                    for (i, (drow, prow)) in dl.chunks_exact_mut(k).zip(probs.chunks_exact(k)).enumerate() {
                        let t = targets[i];
                        if !ignore_free(t) || weights[i] == T::zero() {
                            continue;
                        }
                        let c = g0 * weights[i];
                        for (d, &p) in drow.iter_mut().zip(prow) {
                            *d += c * p;
                        }
                        drow[t] = drow[t] - c;
                    }
                }
            }
        }
    }

    fn grad_buf<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> &'g mut [T] {
        let n = self.value(v).numel();
        grads[v.0].get_or_insert_with(|| vec![T::zero(); n])
    }
}

fn axpy<T: Scalar>(dst: &mut [T], src: &[T], c: T) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += c * s;
    }
}

/// `scores[rows×cols] = scale * q · kᵀ` for one head. `qv` addresses the
/// `[rows, head_dim]` query block and `kv` the `[cols, head_dim]` key block.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_scores<T: Scalar>(q: &[T], qv: View, k: &[T], kv: View, rows: usize, cols: usize, head_dim: usize, scale: T, scores: &mut [T]) {
    kernels::gemm(rows, head_dim, cols, scale, q, qv, k, kv.t(), T::zero(), scores, View::row_major(0, cols));
}

/// `out_rows = weights[rows×cols] · v_cols` for one head.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_apply<T: Scalar>(weights: &[T], v: &[T], vv: View, rows: usize, cols: usize, head_dim: usize, out: &mut [T], ov: View) {
    kernels::gemm(rows, cols, head_dim, T::one(), weights, View::row_major(0, cols), v, vv, T::zero(), out, ov);
}

#[allow(clippy::type_complexity)]
fn attention_backward<T: Scalar>(q: &[T], k: &[T], v: &[T], dout: &[T], geom: AttnGeom, probs: &[T], keep: Option<&[T]>) -> (Vec<T>, Vec<T>, Vec<T>) {
    let AttnGeom { batch, seq_len: l, n_heads, head_dim: dh, .. } = geom;
    let d = geom.width();
    let scale = T::from_f64(1.0 / (dh as f64).sqrt());
    let mut dq = vec![T::zero(); q.len()];
    let mut dk = vec![T::zero(); k.len()];
    let mut dv = vec![T::zero(); v.len()];
    let mut dp = vec![T::zero(); l * l];
    let mut pd = vec![T::zero(); if keep.is_some() { l * l } else { 0 }];
    for b in 0..batch {
        for h in 0..n_heads {
            let base = b * l * d + h * dh;
            let pofs = (b * n_heads + h) * l * l;
            let p = &probs[pofs..pofs + l * l];
            let hv = View { off: base, rs: d, cs: 1 };
            let weights: &[T] = match keep {
                Some(keep) => {
                    for ((dst, &src), &kk) in pd.iter_mut().zip(p).zip(&keep[pofs..pofs + l * l]) {
                        *dst = src * kk;
                    }
                    &pd
                }
                None => p,
            };
            // dV = Wᵀ dO
            kernels::gemm(l, l, dh, T::one(), weights, View::row_major(0, l).t(), dout, hv, T::one(), &mut dv, hv);
            // dW = dO Vᵀ
            kernels::gemm(l, dh, l, T::one(), dout, hv, v, hv.t(), T::zero(), &mut dp, View::row_major(0, l));
            if let Some(keep) = keep {
                for (x, &kk) in dp.iter_mut().zip(&keep[pofs..pofs + l * l]) {
                    *x = *x * kk;
                }
            }
            // dS = P ⊙ (dP - rowsum(dP ⊙ P)), scaled
            for i in 0..l {
                let prow = &p[i * l..(i + 1) * l];
                let drow = &mut dp[i * l..(i + 1) * l];
                let mut dot = T::zero();
                for (&pp, &dd) in prow.iter().zip(drow.iter()) {
                    dot += pp * dd;
                }
                for (dd, &pp) in drow.iter_mut().zip(prow) {
                    *dd = pp * (*dd - dot) * scale;
                }
            }
            // dQ = dS K ; dK = dSᵀ Q
            kernels::gemm(l, l, dh, T::one(), &dp, View::row_major(0, l), k, hv, T::one(), &mut dq, hv);
            kernels::gemm(l, l, dh, T::one(), &dp, View::row_major(0, l).t(), q, hv, T::one(), &mut dk, hv);
        }
    }
    (dq, dk, dv)
}
