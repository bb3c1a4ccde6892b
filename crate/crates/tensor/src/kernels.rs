//! Value-level numeric kernels shared by the tape ops and direct callers.

use crate::error::{Result, TensorError};
use crate::scalar::Real;

/// Output shape of a broadcast binary op, aligning shapes from the trailing end.
pub fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(TensorError::shape(op, a, b)),
        };
    }
    Ok(out)
}

fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let off = out.len() - shape.len();
    let mut strides = vec![0; out.len()];
    let mut s = 1;
    for i in (0..shape.len()).rev() {
        strides[off + i] = if shape[i] == 1 { 0 } else { s };
        s *= shape[i];
    }
    strides
}

/// True when `small` equals the trailing dims of `out` (after dropping leading 1s).
fn is_trailing(small: &[usize], out: &[usize]) -> bool {
    let lead = small.iter().take_while(|&&d| d == 1).count();
    let s = &small[lead..];
    s.len() <= out.len() && &out[out.len() - s.len()..] == s
}

/// Calls `f(out_index, a_index, b_index)` for every element of the broadcast output.
pub fn for_each_broadcast(
    out: &[usize],
    a: &[usize],
    b: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let sa = broadcast_strides(a, out);
    let sb = broadcast_strides(b, out);
    let total: usize = out.iter().product();
    let nd = out.len();
    let mut idx = vec![0usize; nd];
    let (mut ia, mut ib) = (0usize, 0usize);
    for i in 0..total {
        f(i, ia, ib);
        let mut d = nd;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if idx[d] < out[d] {
                break;
            }
            ia -= sa[d] * out[d];
            ib -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

pub fn binary_map<T: Real>(
    a: &[T],
    a_shape: &[usize],
    b: &[T],
    b_shape: &[usize],
    out_shape: &[usize],
    f: impl Fn(T, T) -> T,
) -> Vec<T> {
    let total: usize = out_shape.iter().product();
    if a.len() == total && b.len() == total {
        return a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect();
    }
    if a.len() == total && !b.is_empty() && is_trailing(b_shape, out_shape) {
        let mut out = Vec::with_capacity(total);
        for chunk in a.chunks(b.len()) {
            out.extend(chunk.iter().zip(b).map(|(&x, &y)| f(x, y)));
        }
        return out;
    }
    if b.len() == total && !a.is_empty() && is_trailing(a_shape, out_shape) {
        let mut out = Vec::with_capacity(total);
        for chunk in b.chunks(a.len()) {
            out.extend(a.iter().zip(chunk).map(|(&x, &y)| f(x, y)));
        }
        return out;
    }
    let mut out = vec![T::zero(); total];
    for_each_broadcast(out_shape, a_shape, b_shape, |i, ia, ib| {
        out[i] = f(a[ia], b[ib]);
    });
    out
}

/// Sums a gradient of shape `from` down to the broadcast operand shape `to`.
pub fn sum_to_shape<T: Real>(grad: &[T], from: &[usize], to: &[usize]) -> Vec<T> {
    let n_to: usize = to.iter().product();
    if n_to == grad.len() {
        return grad.to_vec();
    }
    let mut out = vec![T::zero(); n_to];
    if n_to > 0 && is_trailing(to, from) {
        for chunk in grad.chunks(n_to) {
            for (o, &g) in out.iter_mut().zip(chunk) {
                *o += g;
            }
        }
        return out;
    }
    for_each_broadcast(from, to, &[], |i, it, _| {
        out[it] += grad[i];
    });
    out
}

/// Safe GEMM wrapper: `c = op(a) * op(b) (+ c if accumulate)`.
///
/// Logical shapes are `op(a): [m, k]` and `op(b): [k, n]`; with `trans_a` the
/// buffer `a` is stored as `[k, m]`, with `trans_b` the buffer `b` as `[n, k]`.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    trans_a: bool,
    b: &[T],
    trans_b: bool,
    c: &mut [T],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k, "gemm: lhs buffer");
    assert_eq!(b.len(), k * n, "gemm: rhs buffer");
    assert_eq!(c.len(), m * n, "gemm: output buffer");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.iter_mut().for_each(|v| *v = T::zero());
        }
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: buffer lengths are asserted above and strides stay in bounds.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a 1-D convolution over `[batch, time, channels]` inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv1dGeom {
    pub batch: usize,
    pub t_in: usize,
    pub c_in: usize,
    pub kernel: usize,
    pub c_out: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv1dGeom {
    pub fn t_out(&self) -> usize {
        (self.t_in + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn col_width(&self) -> usize {
        self.kernel * self.c_in
    }
}

/// Unfolds `x: [B, T, Cin]` into `[B * T_out, K * Cin]` patches.
pub fn im2col<T: Real>(x: &[T], g: &Conv1dGeom) -> Vec<T> {
    let t_out = g.t_out();
    let w = g.col_width();
    let mut col = vec![T::zero(); g.batch * t_out * w];
    for b in 0..g.batch {
        for to in 0..t_out {
            let row = &mut col[(b * t_out + to) * w..(b * t_out + to + 1) * w];
            for k in 0..g.kernel {
                let ti = (to * g.stride + k) as isize - g.padding as isize;
                if ti < 0 || ti as usize >= g.t_in {
                    continue;
                }
                let src = (b * g.t_in + ti as usize) * g.c_in;
                row[k * g.c_in..(k + 1) * g.c_in].copy_from_slice(&x[src..src + g.c_in]);
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: scatter-adds patches back into `[B, T, Cin]`.
pub fn col2im<T: Real>(col: &[T], g: &Conv1dGeom) -> Vec<T> {
    let t_out = g.t_out();
    let w = g.col_width();
    let mut x = vec![T::zero(); g.batch * g.t_in * g.c_in];
    for b in 0..g.batch {
        for to in 0..t_out {
            let row = &col[(b * t_out + to) * w..(b * t_out + to + 1) * w];
            for k in 0..g.kernel {
                let ti = (to * g.stride + k) as isize - g.padding as isize;
                if ti < 0 || ti as usize >= g.t_in {
                    continue;
                }
                let dst = (b * g.t_in + ti as usize) * g.c_in;
                for (d, &s) in x[dst..dst + g.c_in]
                    .iter_mut()
                    .zip(&row[k * g.c_in..(k + 1) * g.c_in])
                {
                    *d += s;
                }
            }
        }
    }
    x
}

/// Row-major strides of `shape`.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Permutes axes: output axis `i` is input axis `axes[i]`.
pub fn permute<T: Real>(x: &[T], shape: &[usize], axes: &[usize]) -> (Vec<T>, Vec<usize>) {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(x.len());
    let nd = out_shape.len();
    let mut idx = vec![0usize; nd];
    let mut src = 0usize;
    for _ in 0..x.len() {
        out.push(x[src]);
        let mut d = nd;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            src += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            src -= src_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    (out, out_shape)
}

/// Inverse of an axis permutation.
pub fn inverse_axes(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

/// Splits a shape around `axis` into (outer, len, inner) element counts.
pub fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub fn softmax_rows<T: Real>(x: &[T], width: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for (src, dst) in x.chunks(width).zip(out.chunks_mut(width)) {
        let max = src.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - max).exp();
            sum += *d;
        }
        let inv = T::one() / sum;
        dst.iter_mut().for_each(|d| *d *= inv);
    }
    out
}

/// Per-row mean and reciprocal standard deviation (population variance).
pub fn row_moments<T: Real>(x: &[T], width: usize, eps: T) -> (Vec<T>, Vec<T>) {
    let rows = x.len() / width;
    let mut mean = Vec::with_capacity(rows);
    let mut rstd = Vec::with_capacity(rows);
    let w = T::of(width as f64);
    for row in x.chunks(width) {
        let mu = row.iter().copied().sum::<T>() / w;
        let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / w;
        mean.push(mu);
        rstd.push(T::one() / (var + eps).sqrt());
    }
    (mean, rstd)
}

/// Group statistics for `[B, T, C]` data with `groups` channel groups.
pub fn group_moments<T: Real>(
    x: &[T],
    batch: usize,
    time: usize,
    channels: usize,
    groups: usize,
    eps: T,
) -> (Vec<T>, Vec<T>) {
    let cg = channels / groups;
    let count = T::of((time * cg) as f64);
    let mut mean = vec![T::zero(); batch * groups];
    let mut rstd = vec![T::zero(); batch * groups];
    for b in 0..batch {
        let item = &x[b * time * channels..(b + 1) * time * channels];
        let mut sums = vec![T::zero(); groups];
        for row in item.chunks(channels) {
            for (g, s) in sums.iter_mut().enumerate() {
                *s += row[g * cg..(g + 1) * cg].iter().copied().sum::<T>();
            }
        }
        let mus: Vec<T> = sums.iter().map(|&s| s / count).collect();
        let mut vars = vec![T::zero(); groups];
        for row in item.chunks(channels) {
            for (g, v) in vars.iter_mut().enumerate() {
                let mu = mus[g];
                *v += row[g * cg..(g + 1) * cg]
                    .iter()
                    .map(|&x| (x - mu) * (x - mu))
                    .sum::<T>();
            }
        }
        for g in 0..groups {
            mean[b * groups + g] = mus[g];
            rstd[b * groups + g] = T::one() / (vars[g] / count + eps).sqrt();
        }
    }
    (mean, rstd)
}

/// Stable `ln(1 + e^x)`.
pub fn softplus<T: Real>(x: T) -> T {
    if x > T::of(20.0) {
        x
    } else if x < T::of(-20.0) {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
