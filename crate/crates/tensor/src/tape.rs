use std::collections::HashMap;

use crate::error::{Result, TensorError};
use crate::kernels::{self, Conv1dGeom};
use crate::param::{ParamId, ParamStore};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
///
/// Handles are only meaningful on the tape that created them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub(crate) enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        shared_rhs: bool,
    },
    Conv1d {
        x: Var,
        w: Var,
        geom: Conv1dGeom,
    },
    Permute {
        x: Var,
        axes: Vec<usize>,
    },
    Reshape(Var),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        rstd: Vec<T>,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        mean: Vec<T>,
        rstd: Vec<T>,
    },
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Sigmoid(Var),
    Sin(Var),
    Cos(Var),
    Pow(Var, T),
    Softplus(Var),
    Relu(Var),
    Abs(Var),
    Sum(Var),
    Mean(Var),
    SumAxis {
        x: Var,
        axis: usize,
    },
    MaskMul {
        x: Var,
        mask: Vec<T>,
    },
    Repeat {
        x: Var,
        axis: usize,
        factor: usize,
    },
}

#[derive(Debug, Clone)]
pub(crate) struct Node<T> {
    pub(crate) value: Tensor<T>,
    pub(crate) requires_grad: bool,
    pub(crate) op: Op<T>,
}

/// Define-by-run recording of tensor operations.
///
/// Every op appends one node; [`Tape::backward`] replays the backward rules
/// in reverse recording order. A tape supports a single backward pass: a
/// second call fails with [`TensorError::BackwardTwice`] until [`Tape::reset`]
/// clears the recording. Gradients accumulate across passes only inside a
/// [`ParamStore`], via [`ParamStore::accumulate_grads`].
#[derive(Debug, Clone)]
pub struct Tape<T> {
    pub(crate) nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    params: HashMap<ParamId, Var>,
    backward_done: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            params: HashMap::new(),
            backward_done: false,
        }
    }

    /// Drops every recorded node and gradient.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.grads.clear();
        self.params.clear();
        self.backward_done = false;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// A leaf that receives a gradient.
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Places a stored parameter on the tape (once per tape).
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.leaf(store.value(id).clone(), true);
        self.params.insert(id, v);
        v
    }

    /// Copy of `v` cut off from the graph (stop-gradient).
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass with respect to `v`, if reached.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::new(self.nodes[v.0].value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    pub(crate) fn param_vars(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.params.iter().map(|(&p, &v)| (p, v))
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(TensorError::BackwardTwice);
        }
        let loss_value = &self.nodes[loss.0].value;
        if loss_value.numel() != 1 {
            return Err(TensorError::NonScalarLoss(loss_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        self.backward_done = true;
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let out_shape = node.value.shape();
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let negate_b = matches!(node.op, Op::Sub(..));
                if self.needs(*a) {
                    add_into(grads, *a, kernels::sum_to_shape(g, out_shape, val(*a).shape()));
                }
                if self.needs(*b) {
                    let mut gb = kernels::sum_to_shape(g, out_shape, val(*b).shape());
                    if negate_b {
                        gb.iter_mut().for_each(|v| *v = -*v);
                    }
                    add_into(grads, *b, gb);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                if self.needs(*a) {
                    let full = kernels::binary_map(g, out_shape, bv.data(), bv.shape(), out_shape, |x, y| x * y);
                    add_into(grads, *a, kernels::sum_to_shape(&full, out_shape, av.shape()));
                }
                if self.needs(*b) {
                    let full = kernels::binary_map(g, out_shape, av.data(), av.shape(), out_shape, |x, y| x * y);
                    add_into(grads, *b, kernels::sum_to_shape(&full, out_shape, bv.shape()));
                }
            }
            Op::Div(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                if self.needs(*a) {
                    let full = kernels::binary_map(g, out_shape, bv.data(), bv.shape(), out_shape, |x, y| x / y);
                    add_into(grads, *a, kernels::sum_to_shape(&full, out_shape, av.shape()));
                }
                if self.needs(*b) {
                    let g_out: Vec<T> = g.iter().zip(node.value.data()).map(|(&x, &y)| -x * y).collect();
                    let full = kernels::binary_map(&g_out, out_shape, bv.data(), bv.shape(), out_shape, |x, y| x / y);
                    add_into(grads, *b, kernels::sum_to_shape(&full, out_shape, bv.shape()));
                }
            }
            Op::Scale(x, s) => {
                let s = *s;
                add_with(grads, *x, g.len(), |d| {
                    d.iter_mut().zip(g).for_each(|(d, &g)| *d += g * s)
                });
            }
            Op::AddScalar(x) => add_with(grads, *x, g.len(), |d| {
                d.iter_mut().zip(g).for_each(|(d, &g)| *d += g)
            }),
            Op::MatMul {
                a,
                b,
                trans_b,
                batch,
                m,
                k,
                n,
                shared_rhs,
            } => self.backprop_matmul(g, grads, *a, *b, *trans_b, *batch, *m, *k, *n, *shared_rhs),
            Op::Conv1d { x, w, geom } => {
                let rows = geom.batch * geom.t_out();
                let width = geom.col_width();
                if self.needs(*w) {
                    let col = kernels::im2col(val(*x).data(), geom);
                    add_with(grads, *w, width * geom.c_out, |d| {
                        kernels::gemm(width, rows, geom.c_out, &col, true, g, false, d, true)
                    });
                }
                if self.needs(*x) {
                    let mut dcol = vec![T::zero(); rows * width];
                    kernels::gemm(rows, geom.c_out, width, g, false, val(*w).data(), true, &mut dcol, false);
                    add_into(grads, *x, kernels::col2im(&dcol, geom));
                }
            }
            Op::Permute { x, axes } => {
                if self.needs(*x) {
                    let inv = kernels::inverse_axes(axes);
                    let (gx, _) = kernels::permute(g, out_shape, &inv);
                    add_into(grads, *x, gx);
                }
            }
            Op::Reshape(x) => {
                if self.needs(*x) {
                    add_with(grads, *x, g.len(), |d| {
                        d.iter_mut().zip(g).for_each(|(d, &g)| *d += g)
                    });
                }
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = kernels::split_axis(out_shape, *axis);
                let mut offset = 0;
                for v in inputs {
                    let len = val(*v).shape()[*axis];
                    if self.needs(*v) {
                        add_with(grads, *v, outer * len * inner, |d| {
                            for o in 0..outer {
                                let src = &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                                let dst = &mut d[o * len * inner..(o + 1) * len * inner];
                                dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
                            }
                        });
                    }
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                if self.needs(*x) {
                    let in_shape = val(*x).shape();
                    let (outer, total, inner) = kernels::split_axis(in_shape, *axis);
                    let len = out_shape[*axis];
                    add_with(grads, *x, outer * total * inner, |d| {
                        for o in 0..outer {
                            let src = &g[o * len * inner..(o + 1) * len * inner];
                            let dst = &mut d[(o * total + start) * inner..(o * total + start + len) * inner];
                            dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
                        }
                    });
                }
            }
            Op::Softmax(x) => {
                let width = *out_shape.last().unwrap_or(&1);
                let y = node.value.data();
                add_with(grads, *x, g.len(), |d| {
                    for ((dr, yr), gr) in d.chunks_mut(width).zip(y.chunks(width)).zip(g.chunks(width)) {
                        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for ((d, &y), &g) in dr.iter_mut().zip(yr).zip(gr) {
                            *d += y * (g - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            } => self.backprop_layer_norm(g, grads, *x, *gamma, *beta, mean, rstd),
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                mean,
                rstd,
            } => self.backprop_group_norm(g, grads, *x, *gamma, *beta, *groups, mean, rstd),
            Op::Exp(x) => unary_grad(grads, *x, g, node.value.data(), |_, y, g| g * y, val(*x).data()),
            Op::Log(x) => unary_grad(grads, *x, g, node.value.data(), |x, _, g| g / x, val(*x).data()),
            Op::Tanh(x) => unary_grad(grads, *x, g, node.value.data(), |_, y, g| g * (T::one() - y * y), val(*x).data()),
            Op::Sigmoid(x) => unary_grad(grads, *x, g, node.value.data(), |_, y, g| g * y * (T::one() - y), val(*x).data()),
            Op::Sin(x) => unary_grad(grads, *x, g, node.value.data(), |x, _, g| g * x.cos(), val(*x).data()),
            Op::Cos(x) => unary_grad(grads, *x, g, node.value.data(), |x, _, g| -g * x.sin(), val(*x).data()),
            Op::Pow(x, p) => {
                let p = *p;
                unary_grad(grads, *x, g, node.value.data(), |x, _, g| g * p * x.powf(p - T::one()), val(*x).data())
            }
            Op::Softplus(x) => unary_grad(grads, *x, g, node.value.data(), |x, _, g| g * kernels::sigmoid(x), val(*x).data()),
            Op::Relu(x) => unary_grad(
                grads,
                *x,
                g,
                node.value.data(),
                |x, _, g| if x > T::zero() { g } else { T::zero() },
                val(*x).data(),
            ),
            Op::Abs(x) => unary_grad(grads, *x, g, node.value.data(), |x, _, g| if x > T::zero() { g } else if x < T::zero() { -g } else { T::zero() }, val(*x).data()),
            Op::Sum(x) | Op::Mean(x) => {
                let n = val(*x).numel();
                let scale = if matches!(node.op, Op::Mean(_)) {
                    T::one() / T::of(n.max(1) as f64)
                } else {
                    T::one()
                };
                let gv = g[0] * scale;
                add_with(grads, *x, n, |d| d.iter_mut().for_each(|d| *d += gv));
            }
            Op::SumAxis { x, axis } => {
                let (outer, len, inner) = kernels::split_axis(val(*x).shape(), *axis);
                add_with(grads, *x, outer * len * inner, |d| {
                    for o in 0..outer {
                        let gs = &g[o * inner..(o + 1) * inner];
                        for l in 0..len {
                            let dst = &mut d[(o * len + l) * inner..(o * len + l + 1) * inner];
                            dst.iter_mut().zip(gs).for_each(|(d, &s)| *d += s);
                        }
                    }
                });
            }
            Op::MaskMul { x, mask } => add_with(grads, *x, g.len(), |d| {
                for ((d, &g), &m) in d.iter_mut().zip(g).zip(mask) {
                    *d += g * m;
                }
            }),
            Op::Repeat { x, axis, factor } => {
                let (outer, len, inner) = kernels::split_axis(val(*x).shape(), *axis);
                let f = *factor;
                add_with(grads, *x, outer * len * inner, |d| {
                    for o in 0..outer {
                        for l in 0..len {
                            let dst = &mut d[(o * len + l) * inner..(o * len + l + 1) * inner];
                            for r in 0..f {
                                let src_row = (o * len + l) * f + r;
                                let src = &g[src_row * inner..(src_row + 1) * inner];
                                dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
                            }
                        }
                    }
                });
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_matmul(
        &self,
        g: &[T],
        grads: &mut [Option<Vec<T>>],
        a: Var,
        b: Var,
        trans_b: bool,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        shared_rhs: bool,
    ) {
        let av = self.nodes[a.0].value.data();
        let bv = self.nodes[b.0].value.data();
        if shared_rhs {
            if self.needs(a) {
                add_with(grads, a, m * k, |d| kernels::gemm(m, n, k, g, false, bv, !trans_b, d, true));
            }
            if self.needs(b) {
                add_with(grads, b, k * n, |d| {
                    if trans_b {
                        kernels::gemm(n, m, k, g, true, av, false, d, true)
                    } else {
                        kernels::gemm(k, m, n, av, true, g, false, d, true)
                    }
                });
            }
            return;
        }
        let (sa, sb, sc) = (m * k, k * n, m * n);
        if self.needs(a) {
            add_with(grads, a, batch * sa, |d| {
                for i in 0..batch {
                    kernels::gemm(
                        m,
                        n,
                        k,
                        &g[i * sc..(i + 1) * sc],
                        false,
                        &bv[i * sb..(i + 1) * sb],
                        !trans_b,
                        &mut d[i * sa..(i + 1) * sa],
                        true,
                    );
                }
            });
        }
        if self.needs(b) {
            add_with(grads, b, batch * sb, |d| {
                for i in 0..batch {
                    let gi = &g[i * sc..(i + 1) * sc];
                    let ai = &av[i * sa..(i + 1) * sa];
                    let di = &mut d[i * sb..(i + 1) * sb];
                    if trans_b {
                        kernels::gemm(n, m, k, gi, true, ai, false, di, true);
                    } else {
                        kernels::gemm(k, m, n, ai, true, gi, false, di, true);
                    }
                }
            });
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_layer_norm(
        &self,
        g: &[T],
        grads: &mut [Option<Vec<T>>],
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        rstd: &[T],
    ) {
        let xv = self.nodes[x.0].value.data();
        let gam = self.nodes[gamma.0].value.data();
        let width = gam.len();
        let w = T::of(width as f64);
        if self.needs(gamma) {
            add_with(grads, gamma, width, |d| {
                for (r, (xr, gr)) in xv.chunks(width).zip(g.chunks(width)).enumerate() {
                    for ((d, &x), &g) in d.iter_mut().zip(xr).zip(gr) {
                        *d += g * (x - mean[r]) * rstd[r];
                    }
                }
            });
        }
        if self.needs(beta) {
            add_with(grads, beta, width, |d| {
                for gr in g.chunks(width) {
                    d.iter_mut().zip(gr).for_each(|(d, &g)| *d += g);
                }
            });
        }
        if self.needs(x) {
            add_with(grads, x, xv.len(), |d| {
                for (r, ((dr, xr), gr)) in d
                    .chunks_mut(width)
                    .zip(xv.chunks(width))
                    .zip(g.chunks(width))
                    .enumerate()
                {
                    let (mu, rs) = (mean[r], rstd[r]);
                    let mut s1 = T::zero();
                    let mut s2 = T::zero();
                    for ((&x, &g), &ga) in xr.iter().zip(gr).zip(gam) {
                        let dxh = g * ga;
                        s1 += dxh;
                        s2 += dxh * (x - mu) * rs;
                    }
                    let (m1, m2) = (s1 / w, s2 / w);
                    for (((d, &x), &g), &ga) in dr.iter_mut().zip(xr).zip(gr).zip(gam) {
                        let xh = (x - mu) * rs;
                        *d += rs * (g * ga - m1 - xh * m2);
                    }
                }
            });
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_group_norm(
        &self,
        g: &[T],
        grads: &mut [Option<Vec<T>>],
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        mean: &[T],
        rstd: &[T],
    ) {
        let xt = &self.nodes[x.0].value;
        let shape = xt.shape();
        let (batch, time, channels) = (shape[0], shape[1], shape[2]);
        let xv = xt.data();
        let gam = self.nodes[gamma.0].value.data();
        let cg = channels / groups;
        let count = T::of((time * cg) as f64);
        let xhat = |b: usize, c: usize, v: T| {
            let s = b * groups + c / cg;
            (v - mean[s]) * rstd[s]
        };
        if self.needs(gamma) {
            add_with(grads, gamma, channels, |d| {
                for (row, (xr, gr)) in xv.chunks(channels).zip(g.chunks(channels)).enumerate() {
                    let b = row / time;
                    for c in 0..channels {
                        d[c] += gr[c] * xhat(b, c, xr[c]);
                    }
                }
            });
        }
        if self.needs(beta) {
            add_with(grads, beta, channels, |d| {
                for gr in g.chunks(channels) {
                    d.iter_mut().zip(gr).for_each(|(d, &g)| *d += g);
                }
            });
        }
        if self.needs(x) {
            let mut s1 = vec![T::zero(); batch * groups];
            let mut s2 = vec![T::zero(); batch * groups];
            for (row, (xr, gr)) in xv.chunks(channels).zip(g.chunks(channels)).enumerate() {
                let b = row / time;
                for c in 0..channels {
                    let dxh = gr[c] * gam[c];
                    s1[b * groups + c / cg] += dxh;
                    s2[b * groups + c / cg] += dxh * xhat(b, c, xr[c]);
                }
            }
            add_with(grads, x, xv.len(), |d| {
                for (row, ((dr, xr), gr)) in d
                    .chunks_mut(channels)
                    .zip(xv.chunks(channels))
                    .zip(g.chunks(channels))
                    .enumerate()
                {
                    let b = row / time;
                    for c in 0..channels {
                        let s = b * groups + c / cg;
                        let xh = xhat(b, c, xr[c]);
                        dr[c] += rstd[s] * (gr[c] * gam[c] - s1[s] / count - xh * s2[s] / count);
                    }
                }
            });
        }
    }
}

fn add_into<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, contrib: Vec<T>) {
    match &mut grads[v.0] {
        Some(existing) => existing.iter_mut().zip(&contrib).for_each(|(e, &c)| *e += c),
        slot @ None => *slot = Some(contrib),
    }
}

fn add_with<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, len: usize, f: impl FnOnce(&mut [T])) {
    let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); len]);
    f(slot);
}

fn unary_grad<T: Real>(
    grads: &mut [Option<Vec<T>>],
    x: Var,
    g: &[T],
    y: &[T],
    f: impl Fn(T, T, T) -> T,
    xv: &[T],
) {
    add_with(grads, x, g.len(), |d| {
        for (((d, &g), &y), &x) in d.iter_mut().zip(g).zip(y).zip(xv) {
            *d += f(x, y, g);
        }
    });
}
