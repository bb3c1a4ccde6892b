use crate::error::{Result, TensorError};
use crate::kernels::{self, Conv1dGeom};
use crate::scalar::Real;
use crate::tape::{Op, Tape, Var};
use crate::tensor::Tensor;

impl<T: Real> Tape<T> {
    fn unary(&mut self, x: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let value = self.value(x).map(f);
        let rg = self.requires_grad(x);
        self.push(value, op, rg)
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Var> {
        let value = self.value(a).zip_with(self.value(b), name, f)?;
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "div", Op::Div(a, b), |x, y| x / y)
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        self.unary(x, Op::Scale(x, s), |v| v * s)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -T::one())
    }

    pub fn add_scalar(&mut self, x: Var, s: T) -> Var {
        self.unary(x, Op::AddScalar(x), |v| v + s)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), |v| v.exp())
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, Op::Log(x), |v| v.ln())
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Op::Tanh(x), |v| v.tanh())
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), kernels::sigmoid)
    }

    pub fn sin(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sin(x), |v| v.sin())
    }

    pub fn cos(&mut self, x: Var) -> Var {
        self.unary(x, Op::Cos(x), |v| v.cos())
    }

    pub fn powf(&mut self, x: Var, p: T) -> Var {
        self.unary(x, Op::Pow(x, p), |v| v.powf(p))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.powf(x, T::of(2.0))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, Op::Softplus(x), kernels::softplus)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| v.max(T::zero()))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, Op::Abs(x), |v| v.abs())
    }

    /// `x * tanh(softplus(x))`.
    pub fn mish(&mut self, x: Var) -> Result<Var> {
        let sp = self.softplus(x);
        let th = self.tanh(sp);
        self.mul(x, th)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.requires_grad(x);
        self.push(value, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).mean());
        let rg = self.requires_grad(x);
        self.push(value, Op::Mean(x), rg)
    }

    /// Sums over `axis`, removing it (or keeping it with size 1 when `keepdim`).
    pub fn sum_axis(&mut self, x: Var, axis: usize, keepdim: bool) -> Result<Var> {
        let xv = self.value(x);
        if axis >= xv.rank() {
            return Err(TensorError::invalid("sum_axis", format!("axis {} for shape {:?}", axis, xv.shape())));
        }
        let (outer, len, inner) = kernels::split_axis(xv.shape(), axis);
        let data = xv.data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            let dst = &mut out[o * inner..(o + 1) * inner];
            for l in 0..len {
                let src = &data[(o * len + l) * inner..(o * len + l + 1) * inner];
                dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
            }
        }
        let mut shape = xv.shape().to_vec();
        if keepdim {
            shape[axis] = 1;
        } else {
            shape.remove(axis);
        }
        let rg = self.requires_grad(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::SumAxis { x, axis }, rg))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize, keepdim: bool) -> Result<Var> {
        let len = self.value(x).shape().get(axis).copied().unwrap_or(1);
        let s = self.sum_axis(x, axis, keepdim)?;
        Ok(self.scale(s, T::one() / T::of(len.max(1) as f64)))
    }

    /// Matrix product. Supported forms: `[.., m, k] x [k, n]` (rhs shared
    /// across all leading dims) and `[.., m, k] x [.., k, n]` with identical
    /// leading dims.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a x b^T` over the last two axes.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let ash = self.value(a).shape().to_vec();
        let bsh = self.value(b).shape().to_vec();
        if ash.is_empty() || bsh.len() < 2 {
            return Err(TensorError::shape("matmul", &ash, &bsh));
        }
        let k = ash[ash.len() - 1];
        let (bk, n) = if trans_b {
            (bsh[bsh.len() - 1], bsh[bsh.len() - 2])
        } else {
            (bsh[bsh.len() - 2], bsh[bsh.len() - 1])
        };
        if bk != k {
            return Err(TensorError::shape("matmul", &ash, &bsh));
        }
        let mut out_shape = ash.clone();
        *out_shape.last_mut().unwrap() = n;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let op;
        let out = if bsh.len() == 2 {
            let m = av.len() / k.max(1);
            let mut out = vec![T::zero(); m * n];
            kernels::gemm(m, k, n, av, false, bv, trans_b, &mut out, false);
            op = Op::MatMul {
                a,
                b,
                trans_b,
                batch: 1,
                m,
                k,
                n,
                shared_rhs: true,
            };
            out
        } else {
            if ash.len() != bsh.len() || ash.len() < 2 || ash[..ash.len() - 2] != bsh[..bsh.len() - 2] {
                return Err(TensorError::shape("matmul", &ash, &bsh));
            }
            let m = ash[ash.len() - 2];
            let batch: usize = ash[..ash.len() - 2].iter().product();
            let mut out = vec![T::zero(); batch * m * n];
            for i in 0..batch {
                kernels::gemm(
                    m,
                    k,
                    n,
                    &av[i * m * k..(i + 1) * m * k],
                    false,
                    &bv[i * k * n..(i + 1) * k * n],
                    trans_b,
                    &mut out[i * m * n..(i + 1) * m * n],
                    false,
                );
            }
            op = Op::MatMul {
                a,
                b,
                trans_b,
                batch,
                m,
                k,
                n,
                shared_rhs: false,
            };
            out
        };
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(Tensor::new(out_shape, out)?, op, rg))
    }

    /// 1-D convolution of `x: [B, T, Cin]` with `w: [K, Cin, Cout]`, zero padding
    /// on both sides. Bias is added separately.
    pub fn conv1d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        if xs.len() != 3 || ws.len() != 3 || xs[2] != ws[1] {
            return Err(TensorError::shape("conv1d", &xs, &ws));
        }
        if stride == 0 || xs[1] + 2 * padding < ws[0] {
            return Err(TensorError::invalid(
                "conv1d",
                format!("kernel {} stride {} padding {} on length {}", ws[0], stride, padding, xs[1]),
            ));
        }
        let geom = Conv1dGeom {
            batch: xs[0],
            t_in: xs[1],
            c_in: xs[2],
            kernel: ws[0],
            c_out: ws[2],
            stride,
            padding,
        };
        let col = kernels::im2col(self.value(x).data(), &geom);
        let rows = geom.batch * geom.t_out();
        let mut out = vec![T::zero(); rows * geom.c_out];
        kernels::gemm(rows, geom.col_width(), geom.c_out, &col, false, self.value(w).data(), false, &mut out, false);
        let value = Tensor::new(vec![geom.batch, geom.t_out(), geom.c_out], out)?;
        let rg = self.requires_grad(x) || self.requires_grad(w);
        Ok(self.push(value, Op::Conv1d { x, w, geom }, rg))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(TensorError::invalid("permute", format!("axes {:?} for shape {:?}", axes, shape)));
        }
        let (data, out_shape) = kernels::permute(self.value(x).data(), &shape, axes);
        let rg = self.requires_grad(x);
        Ok(self.push(Tensor::new(out_shape, data)?, Op::Permute { x, axes: axes.to_vec() }, rg))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let r = self.value(x).rank();
        if r < 2 {
            return Err(TensorError::invalid("transpose", "needs rank >= 2"));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(x, &axes)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape.to_vec())?;
        let rg = self.requires_grad(x);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| TensorError::invalid("concat", "no inputs"))?;
        let base = self.value(*first).shape().to_vec();
        if axis >= base.len() {
            return Err(TensorError::invalid("concat", format!("axis {} for shape {:?}", axis, base)));
        }
        let mut total = 0;
        for v in inputs {
            let s = self.value(*v).shape();
            if s.len() != base.len() || s.iter().enumerate().any(|(i, &d)| i != axis && d != base[i]) {
                return Err(TensorError::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = kernels::split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in inputs {
                let t = self.value(*v);
                let len = t.shape()[axis];
                out.extend_from_slice(&t.data()[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = inputs.iter().any(|&v| self.requires_grad(v));
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Elements `[start, start+len)` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(TensorError::invalid(
                "slice",
                format!("range {}..{} on axis {} of {:?}", start, start + len, axis, shape),
            ));
        }
        let (outer, total, inner) = kernels::split_axis(&shape, axis);
        let data = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&data[(o * total + start) * inner..(o * total + start + len) * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let rg = self.requires_grad(x);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::Slice { x, axis, start }, rg))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let width = *xv
            .shape()
            .last()
            .ok_or_else(|| TensorError::invalid("softmax", "scalar input"))?;
        let data = kernels::softmax_rows(xv.data(), width);
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.requires_grad(x);
        Ok(self.push(value, Op::Softmax(x), rg))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let xv = self.value(x);
        let width = *xv.shape().last().unwrap_or(&0);
        let (gs, bs) = (self.value(gamma).shape(), self.value(beta).shape());
        if gs != [width] || bs != [width] {
            return Err(TensorError::shape("layer_norm", xv.shape(), gs));
        }
        let (mean, rstd) = kernels::row_moments(xv.data(), width, eps);
        let (gam, bet) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = Vec::with_capacity(xv.numel());
        for (r, row) in xv.data().chunks(width).enumerate() {
            for (c, &v) in row.iter().enumerate() {
                out.push((v - mean[r]) * rstd[r] * gam[c] + bet[c]);
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.requires_grad(x) || self.requires_grad(gamma) || self.requires_grad(beta);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            },
            rg,
        ))
    }

    /// Group normalization of `x: [B, T, C]` over `groups` channel groups.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize, eps: T) -> Result<Var> {
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        if shape.len() != 3 || groups == 0 || !shape[2].is_multiple_of(groups) {
            return Err(TensorError::invalid(
                "group_norm",
                format!("{} groups for shape {:?}", groups, shape),
            ));
        }
        let (b, t, c) = (shape[0], shape[1], shape[2]);
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(TensorError::shape("group_norm", &shape, self.value(gamma).shape()));
        }
        let (mean, rstd) = kernels::group_moments(xv.data(), b, t, c, groups, eps);
        let cg = c / groups;
        let (gam, bet) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = Vec::with_capacity(xv.numel());
        for (row, vals) in xv.data().chunks(c).enumerate() {
            let bi = row / t;
            for (ch, &v) in vals.iter().enumerate() {
                let s = bi * groups + ch / cg;
                out.push((v - mean[s]) * rstd[s] * gam[ch] + bet[ch]);
            }
        }
        let value = Tensor::new(shape, out)?;
        let rg = self.requires_grad(x) || self.requires_grad(gamma) || self.requires_grad(beta);
        Ok(self.push(
            value,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                mean,
                rstd,
            },
            rg,
        ))
    }

    /// Multiplies by a fixed mask drawn outside the tape (dropout).
    pub fn mask_mul(&mut self, x: Var, mask: &Tensor<T>) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape() != mask.shape() {
            return Err(TensorError::shape("dropout", xv.shape(), mask.shape()));
        }
        let value = xv.mul(mask)?;
        let rg = self.requires_grad(x);
        Ok(self.push(
            value,
            Op::MaskMul {
                x,
                mask: mask.data().to_vec(),
            },
            rg,
        ))
    }

    /// Repeats every element `factor` times along `axis` (nearest upsampling).
    pub fn repeat_axis(&mut self, x: Var, axis: usize, factor: usize) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        if axis >= shape.len() || factor == 0 {
            return Err(TensorError::invalid("repeat", format!("axis {} factor {} on {:?}", axis, factor, shape)));
        }
        let (outer, len, inner) = kernels::split_axis(&shape, axis);
        let data = self.value(x).data();
        let mut out = Vec::with_capacity(data.len() * factor);
        for o in 0..outer {
            for l in 0..len {
                let row = &data[(o * len + l) * inner..(o * len + l + 1) * inner];
                for _ in 0..factor {
                    out.extend_from_slice(row);
                }
            }
        }
        let mut out_shape = shape;
        out_shape[axis] *= factor;
        let rg = self.requires_grad(x);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::Repeat { x, axis, factor }, rg))
    }
}
