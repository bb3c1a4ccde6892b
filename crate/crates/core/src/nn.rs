//! Parameterized layers over the tape. Layers hold only parameter ids; the
//! values live in a [`ParamStore`] and are placed on the tape per forward.

use flowmac_tensor::{ParamId, ParamStore, Real, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;

/// Forward-pass context: the tape, read access to parameters, and the
/// dropout RNG when training.
pub struct Ctx<'a, T: Real> {
    pub tape: Tape<T>,
    pub params: &'a ParamStore<T>,
    pub train: bool,
    rng: ChaCha8Rng,
}

impl<'a, T: Real> Ctx<'a, T> {
    pub fn inference(params: &'a ParamStore<T>) -> Self {
        Ctx {
            tape: Tape::new(),
            params,
            train: false,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    pub fn training(params: &'a ParamStore<T>, dropout_seed: u64) -> Self {
        Ctx {
            tape: Tape::new(),
            params,
            train: true,
            rng: ChaCha8Rng::seed_from_u64(dropout_seed),
        }
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        self.tape.param(self.params, id)
    }

    pub fn into_tape(self) -> Tape<T> {
        self.tape
    }

    /// Inverted dropout; a no-op outside training or for `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        if !self.train || p <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - p;
        let scale = T::of(1.0 / keep);
        let shape = self.tape.shape(x).to_vec();
        let rng = &mut self.rng;
        let mask = Tensor::from_fn(shape, |_| if rng.random::<f64>() < keep { scale } else { T::zero() });
        Ok(self.tape.mask_mul(x, &mask)?)
    }
}

/// Parameter registration with a seeded initializer and a name prefix.
pub struct Init<'a, T: Real> {
    pub store: &'a mut ParamStore<T>,
    pub rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a, T: Real> Init<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut ChaCha8Rng) -> Self {
        Init {
            store,
            rng,
            prefix: String::new(),
        }
    }

    /// Runs `f` with `name.` appended to the prefix.
    pub fn scope<R>(&mut self, name: &str, f: impl FnOnce(&mut Init<'_, T>) -> Result<R>) -> Result<R> {
        let mut inner = Init {
            store: &mut *self.store,
            rng: &mut *self.rng,
            prefix: format!("{}{}.", self.prefix, name),
        };
        f(&mut inner)
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<ParamId> {
        let rng = &mut *self.rng;
        let t = Tensor::from_fn(shape.to_vec(), |_| T::of(rng.random_range(-bound..=bound)));
        self.constant(name, t)
    }

    pub fn fill(&mut self, name: &str, shape: &[usize], value: f64) -> Result<ParamId> {
        self.constant(name, Tensor::full(shape.to_vec(), T::of(value)))
    }

    fn constant(&mut self, name: &str, t: Tensor<T>) -> Result<ParamId> {
        Ok(self.store.add(format!("{}{}", self.prefix, name), t)?)
    }
}

/// `y = x W + b` over the last axis.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Real>(init: &mut Init<'_, T>, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        let bound = 1.0 / (d_in as f64).sqrt();
        init.scope(name, |i| {
            Ok(Linear {
                weight: i.uniform("weight", &[d_in, d_out], bound)?,
                bias: Some(i.uniform("bias", &[d_out], bound)?),
            })
        })
    }

    /// `y = x W`.
    pub fn without_bias<T: Real>(init: &mut Init<'_, T>, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        let bound = 1.0 / (d_in as f64).sqrt();
        init.scope(name, |i| {
            Ok(Linear {
                weight: i.uniform("weight", &[d_in, d_out], bound)?,
                bias: None,
            })
        })
    }

    pub fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let w = cx.p(self.weight);
        let y = cx.tape.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = cx.p(b);
                Ok(cx.tape.add(y, b)?)
            }
            None => Ok(y),
        }
    }
}

/// Channel-last 1-D convolution with bias and symmetric zero padding.
#[derive(Debug, Clone)]
pub struct Conv1d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub padding: usize,
}

impl Conv1d {
    pub fn new<T: Real>(
        init: &mut Init<'_, T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
    ) -> Result<Self> {
        let bound = 1.0 / ((kernel * c_in) as f64).sqrt();
        init.scope(name, |i| {
            Ok(Conv1d {
                weight: i.uniform("weight", &[kernel, c_in, c_out], bound)?,
                bias: i.uniform("bias", &[c_out], bound)?,
                stride,
                padding: kernel / 2,
            })
        })
    }

    pub fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let (w, b) = (cx.p(self.weight), cx.p(self.bias));
        let y = cx.tape.conv1d(x, w, self.stride, self.padding)?;
        Ok(cx.tape.add(y, b)?)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Real>(init: &mut Init<'_, T>, name: &str, width: usize) -> Result<Self> {
        init.scope(name, |i| {
            Ok(LayerNorm {
                gamma: i.fill("gamma", &[width], 1.0)?,
                beta: i.fill("beta", &[width], 0.0)?,
            })
        })
    }

    pub fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let (g, b) = (cx.p(self.gamma), cx.p(self.beta));
        Ok(cx.tape.layer_norm(x, g, b, T::of(1e-5))?)
    }
}

#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl GroupNorm {
    pub fn new<T: Real>(init: &mut Init<'_, T>, name: &str, channels: usize, groups: usize) -> Result<Self> {
        init.scope(name, |i| {
            Ok(GroupNorm {
                gamma: i.fill("gamma", &[channels], 1.0)?,
                beta: i.fill("beta", &[channels], 0.0)?,
                groups,
            })
        })
    }

    pub fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let (g, b) = (cx.p(self.gamma), cx.p(self.beta));
        Ok(cx.tape.group_norm(x, g, b, self.groups, T::of(1e-5))?)
    }
}

/// Multi-head self-attention on `[B, T, C]`.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<T: Real>(init: &mut Init<'_, T>, name: &str, width: usize, heads: usize) -> Result<Self> {
        init.scope(name, |i| {
            Ok(MultiHeadAttention {
                q: Linear::new(i, "q", width, width)?,
                k: Linear::new(i, "k", width, width)?,
                v: Linear::new(i, "v", width, width)?,
                out: Linear::new(i, "out", width, width)?,
                heads,
            })
        })
    }

    pub fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let shape = cx.tape.shape(x).to_vec();
        let (b, t, c) = (shape[0], shape[1], shape[2]);
        let h = self.heads;
        let d = c / h;
        let split = |lin: &Linear, cx: &mut Ctx<'_, T>| -> Result<Var> {
            let y = lin.forward(cx, x)?;
            let y = cx.tape.reshape(y, &[b, t, h, d])?;
            Ok(cx.tape.permute(y, &[0, 2, 1, 3])?)
        };
        let q = split(&self.q, cx)?;
        let k = split(&self.k, cx)?;
        let v = split(&self.v, cx)?;
        let scores = cx.tape.matmul_nt(q, k)?;
        let scores = cx.tape.scale(scores, T::of(1.0 / (d as f64).sqrt()));
        let attn = cx.tape.softmax(scores)?;
        let y = cx.tape.matmul(attn, v)?;
        let y = cx.tape.permute(y, &[0, 2, 1, 3])?;
        let y = cx.tape.reshape(y, &[b, t, c])?;
        self.out.forward(cx, y)
    }
}

/// `x + sin^2(alpha x) / (beta + 1e-9)` with per-channel `alpha = exp(a)`,
/// `beta = exp(b)`.
#[derive(Debug, Clone)]
pub struct SnakeBeta {
    pub log_alpha: ParamId,
    pub log_beta: ParamId,
}

pub const SNAKE_EPS: f64 = 1e-9;

impl SnakeBeta {
    pub fn new<T: Real>(init: &mut Init<'_, T>, name: &str, channels: usize) -> Result<Self> {
        init.scope(name, |i| {
            Ok(SnakeBeta {
                log_alpha: i.fill("log_alpha", &[channels], 0.0)?,
                log_beta: i.fill("log_beta", &[channels], 0.0)?,
            })
        })
    }

    pub fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let (la, lb) = (cx.p(self.log_alpha), cx.p(self.log_beta));
        let alpha = cx.tape.exp(la);
        let beta = cx.tape.exp(lb);
        snakebeta(&mut cx.tape, x, alpha, beta)
    }
}

/// Snake-beta activation with explicit (positive) `alpha` and `beta`.
pub fn snakebeta<T: Real>(tape: &mut Tape<T>, x: Var, alpha: Var, beta: Var) -> Result<Var> {
    let ax = tape.mul(x, alpha)?;
    let s = tape.sin(ax);
    let s2 = tape.square(s);
    let denom = tape.add_scalar(beta, T::of(SNAKE_EPS));
    let term = tape.div(s2, denom)?;
    Ok(tape.add(x, term)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn snakebeta_values() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_f64(vec![3], &[0.0, std::f64::consts::PI / 4.0, 1.0]).unwrap());
        let alpha = tape.constant(Tensor::scalar(2.0));
        let beta = tape.constant(Tensor::scalar(1.0));
        let y = snakebeta(&mut tape, x, alpha, beta).unwrap();
        let v = tape.value(y).data().to_vec();
        assert_eq!(v[0], 0.0);
        // x = pi / (2 alpha): sin^2 = 1.
        let expect = std::f64::consts::PI / 4.0 + 1.0 / (1.0 + SNAKE_EPS);
        assert!((v[1] - expect).abs() < 1e-12);

        let tiny = tape.constant(Tensor::scalar(1e-8));
        let y = snakebeta(&mut tape, x, tiny, beta).unwrap();
        assert!((tape.value(y).data()[2] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn dropout_only_in_training() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let lin = Linear::new(&mut Init::new(&mut store, &mut rng), "l", 4, 4).unwrap();
        let x_val = Tensor::from_fn(vec![2, 4], |i| i as f64);
        let mut cx = Ctx::inference(&store);
        let x = cx.tape.constant(x_val.clone());
        let y = lin.forward(&mut cx, x).unwrap();
        let d = cx.dropout(y, 0.5).unwrap();
        assert_eq!(d, y);

        let mut cx = Ctx::training(&store, 3);
        let x = cx.tape.constant(Tensor::ones(vec![1000]));
        let d = cx.dropout(x, 0.25).unwrap();
        let v = cx.tape.value(d);
        assert!(v.data().iter().all(|&e| e == 0.0 || (e - 4.0 / 3.0).abs() < 1e-12));
        let kept = v.data().iter().filter(|&&e| e > 0.0).count();
        assert!((700..800).contains(&kept), "{kept}");
    }

    #[test]
    fn attention_preserves_shape_and_names_params() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mha = {
            let mut init = Init::new(&mut store, &mut rng);
            init.scope("enc", |i| MultiHeadAttention::new(i, "attn", 8, 2)).unwrap()
        };
        assert!(store.id("enc.attn.q.weight").is_some());
        let mut cx = Ctx::inference(&store);
        let x = cx.tape.constant(Tensor::from_fn(vec![2, 5, 8], |i| (i as f64 * 0.37).sin()));
        let y = mha.forward(&mut cx, x).unwrap();
        assert_eq!(cx.tape.shape(y), &[2, 5, 8]);
    }
}
