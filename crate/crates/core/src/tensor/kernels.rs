//! Slice-level numeric kernels shared by the autodiff graph and the
//! cache-based inference path. Both paths call the same functions so that
//! incremental decoding reproduces full-forward arithmetic.

use super::Scalar;

/// Strided 2-D view into a flat buffer.
#[derive(Clone, Copy, Debug)]
pub struct View {
    pub off: usize,
    pub rs: usize,
    pub cs: usize,
}

impl View {
    pub fn row_major(off: usize, cols: usize) -> Self {
        View { off, rs: cols, cs: 1 }
    }

    /// Same buffer, read transposed.
    pub fn t(self) -> Self {
        View { off: self.off, rs: self.cs, cs: self.rs }
    }

    fn last_index(&self, rows: usize, cols: usize) -> Option<usize> {
        if rows == 0 || cols == 0 {
            return None;
        }
        Some(self.off + (rows - 1) * self.rs + (cols - 1) * self.cs)
    }
}

/// `c = alpha * a[m×k] @ b[k×n] + beta * c[m×n]` over strided views.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: &[T],
    av: View,
    b: &[T],
    bv: View,
    beta: T,
    c: &mut [T],
    cv: View,
) {
    if let Some(i) = av.last_index(m, k) {
        assert!(i < a.len(), "gemm: lhs view out of bounds");
    }
    if let Some(i) = bv.last_index(k, n) {
        assert!(i < b.len(), "gemm: rhs view out of bounds");
    }
    match cv.last_index(m, n) {
        Some(i) => assert!(i < c.len(), "gemm: output view out of bounds"),
        None => return,
    }
    // SAFETY: all three views were bounds-checked above; `c` is uniquely borrowed.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.as_ptr().add(av.off),
            av.rs as isize,
            av.cs as isize,
            b.as_ptr().add(bv.off),
            bv.rs as isize,
            bv.cs as isize,
            beta,
            c.as_mut_ptr().add(cv.off),
            cv.rs as isize,
            cv.cs as isize,
        )
    }
}

/// Row-major `a[m×k] @ b[k×n]` into a fresh buffer.
pub fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    gemm(
        m,
        k,
        n,
        T::one(),
        a,
        View::row_major(0, k),
        b,
        View::row_major(0, n),
        T::zero(),
        &mut c,
        View::row_major(0, n),
    );
    c
}

pub const RMS_EPS: f64 = 1e-6;

/// RMS-normalizes consecutive groups of `group` elements and scales by `w`.
/// Writes the per-group inverse RMS into `inv`.
pub fn rms_norm<T: Scalar>(x: &[T], w: &[T], group: usize, y: &mut [T], inv: &mut [T]) {
    debug_assert_eq!(w.len(), group);
    let eps = T::from_f64(RMS_EPS);
    let g = T::from_f64(group as f64);
    for (gi, (xs, ys)) in x.chunks_exact(group).zip(y.chunks_exact_mut(group)).enumerate() {
        let mut ss = T::zero();
        for &v in xs {
            ss += v * v;
        }
        let r = T::one() / (ss / g + eps).sqrt();
        inv[gi] = r;
        for ((o, &v), &s) in ys.iter_mut().zip(xs).zip(w) {
            *o = v * r * s;
        }
    }
}

/// Backward of [`rms_norm`]; accumulates into `dx` and `dw` when present.
pub fn rms_norm_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    inv: &[T],
    dy: &[T],
    group: usize,
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
) {
    let g = T::from_f64(group as f64);
    for (gi, (xs, dys)) in x.chunks_exact(group).zip(dy.chunks_exact(group)).enumerate() {
        let r = inv[gi];
        if let Some(dw) = dw.as_deref_mut() {
            for j in 0..group {
                dw[j] += dys[j] * xs[j] * r;
            }
        }
        if let Some(dx) = dx.as_deref_mut() {
            // dx = r * (w*dy) - r^3/g * x * sum(w*dy*x)
            let mut dot = T::zero();
            for j in 0..group {
                dot += w[j] * dys[j] * xs[j];
            }
            let c = r * r * r * dot / g;
            let dxs = &mut dx[gi * group..(gi + 1) * group];
            for j in 0..group {
                dxs[j] += r * w[j] * dys[j] - c * xs[j];
            }
        }
    }
}

/// Rotary-embedding angles for a run of consecutive positions.
#[derive(Clone, Debug)]
pub struct RopeTable<T> {
    pub start: usize,
    pub half: usize,
    pub cos: Vec<T>,
    pub sin: Vec<T>,
}

impl<T: Scalar> RopeTable<T> {
    pub fn new(start: usize, len: usize, head_dim: usize, base: f64) -> Self {
        let half = head_dim / 2;
        let mut cos = Vec::with_capacity(len * half);
        let mut sin = Vec::with_capacity(len * half);
        for p in start..start + len {
            for i in 0..half {
                let freq = base.powf(-(2.0 * i as f64) / head_dim as f64);
                let theta = p as f64 * freq;
                cos.push(T::from_f64(theta.cos()));
                sin.push(T::from_f64(theta.sin()));
            }
        }
        RopeTable { start, half, cos, sin }
    }
}

/// Rotates each head of each row in place (rotate-half convention).
/// `pos_of_row` maps a row index to a position relative to `table.start`.
/// `inverse` applies the transpose rotation (used by the backward pass).
pub fn rope_in_place<T: Scalar>(
    x: &mut [T],
    width: usize,
    head_dim: usize,
    table: &RopeTable<T>,
    pos_of_row: impl Fn(usize) -> usize,
    inverse: bool,
) {
    let half = table.half;
    for (r, row) in x.chunks_exact_mut(width).enumerate() {
        let p = pos_of_row(r);
        let cs = &table.cos[p * half..(p + 1) * half];
        let sn = &table.sin[p * half..(p + 1) * half];
        for head in row.chunks_exact_mut(head_dim) {
            let (a, b) = head.split_at_mut(half);
            for i in 0..half {
                let (x1, x2) = (a[i], b[i]);
                let (c, s) = (cs[i], if inverse { -sn[i] } else { sn[i] });
                a[i] = x1 * c - x2 * s;
                b[i] = x1 * s + x2 * c;
            }
        }
    }
}

/// Numerically stable softmax over a slice, in place.
pub fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let mut mx = T::neg_infinity();
    for &v in row.iter() {
        if v > mx {
            mx = v;
        }
    }
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - mx).exp();
        sum += *v;
    }
    let inv = T::one() / sum;
    for v in row.iter_mut() {
        *v = *v * inv;
    }
}

/// `log(sum(exp(row)))`, max-subtracted.
pub fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let mut mx = T::neg_infinity();
    for &v in row {
        if v > mx {
            mx = v;
        }
    }
    let mut sum = T::zero();
    for &v in row {
        sum += (v - mx).exp();
    }
    mx + sum.ln()
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

#[inline]
pub fn silu<T: Scalar>(x: T) -> T {
    x * sigmoid(x)
}
