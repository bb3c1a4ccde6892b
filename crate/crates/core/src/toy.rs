//! Two-dimensional flow-matching bench: a small MLP field trained on a known
//! target distribution and sampled with the same Euler integrator the codec
//! uses, so the generative machinery can be checked without any audio.

use flowmac_tensor::{Adam, AdamConfig, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::cfm::{cfm_loss, path_from, standard_normal};
use crate::config::SamplerConfig;
use crate::error::{CodecError, Result};
use crate::model::time_embed;
use crate::nn::{Ctx, Init, Linear};
use crate::sampler::{euler_integrate, initial_noise};

const DIM: usize = 2;

#[derive(Debug, Clone, PartialEq)]
pub enum ToyKind {
    SingleGaussian,
    TwoGaussianMixture,
}

/// Diagonal Gaussian mixture in the plane.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyTarget {
    pub kind: ToyKind,
    pub means: Vec<[f64; 2]>,
    pub stds: Vec<[f64; 2]>,
    pub weights: Vec<f64>,
}

impl ToyTarget {
    pub fn single_gaussian(mean: [f64; 2], std: [f64; 2]) -> Result<Self> {
        Self::checked(ToyKind::SingleGaussian, vec![mean], vec![std], vec![1.0])
    }

    pub fn two_gaussian_mixture(means: [[f64; 2]; 2], stds: [[f64; 2]; 2], w0: f64) -> Result<Self> {
        Self::checked(ToyKind::TwoGaussianMixture, means.to_vec(), stds.to_vec(), vec![w0, 1.0 - w0])
    }

    fn checked(kind: ToyKind, means: Vec<[f64; 2]>, stds: Vec<[f64; 2]>, weights: Vec<f64>) -> Result<Self> {
        if stds.iter().flatten().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(CodecError::Invalid("toy target stds must be positive".into()));
        }
        if weights.iter().any(|&w| !(0.0..=1.0).contains(&w)) || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(CodecError::Invalid(format!("toy weights {weights:?} must be a distribution")));
        }
        Ok(ToyTarget {
            kind,
            means,
            stds,
            weights,
        })
    }

    /// `n` draws as a `[n, 2]` tensor.
    pub fn sample(&self, n: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let mut data = Vec::with_capacity(n * DIM);
        for _ in 0..n {
            let mut u: f64 = rng.random();
            let mut k = 0;
            while k + 1 < self.weights.len() && u >= self.weights[k] {
                u -= self.weights[k];
                k += 1;
            }
            for d in 0..DIM {
                let z: f64 = StandardNormal.sample(rng);
                data.push(self.means[k][d] + self.stds[k][d] * z);
            }
        }
        Tensor::new(vec![n, DIM], data).expect("toy sample shape")
    }

    /// Closed-form mean and per-dimension std of the mixture.
    pub fn moments(&self) -> ([f64; 2], [f64; 2]) {
        let mut mean = [0.0; 2];
        let mut second = [0.0; 2];
        for ((m, s), w) in self.means.iter().zip(&self.stds).zip(&self.weights) {
            for d in 0..DIM {
                mean[d] += w * m[d];
                second[d] += w * (s[d] * s[d] + m[d] * m[d]);
            }
        }
        let std = [(second[0] - mean[0].powi(2)).sqrt(), (second[1] - mean[1].powi(2)).sqrt()];
        (mean, std)
    }
}

#[derive(Debug, Clone)]
pub struct ToyConfig {
    pub train_steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub sigma_min: f64,
    pub hidden: usize,
    pub time_dim: usize,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            train_steps: 5000,
            batch_size: 256,
            lr: 1e-3,
            sigma_min: 1e-4,
            hidden: 64,
            time_dim: 16,
            seed: 0,
        }
    }
}

/// MLP field `v(x, t)` on `[x, embed(t)]` with three hidden layers.
pub struct ToyField {
    pub params: ParamStore<f64>,
    layers: Vec<Linear>,
    time_dim: usize,
}

impl ToyField {
    pub fn new(hidden: usize, time_dim: usize, seed: u64) -> Result<Self> {
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init::new(&mut params, &mut rng);
        let widths = [DIM + time_dim, hidden, hidden, hidden, DIM];
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(&mut init, &format!("toy.l{i}"), w[0], w[1]))
            .collect::<Result<Vec<_>>>()?;
        Ok(ToyField {
            params,
            layers,
            time_dim,
        })
    }

    fn input(&self, x: &Tensor<f64>, t: &[f64]) -> Result<Tensor<f64>> {
        let n = x.shape()[0];
        let width = DIM + self.time_dim;
        let mut data = Vec::with_capacity(n * width);
        for (i, row) in x.data().chunks(DIM).enumerate() {
            data.extend_from_slice(row);
            data.extend(time_embed(t[i], self.time_dim)?);
        }
        Ok(Tensor::new(vec![n, width], data)?)
    }

    fn forward(&self, cx: &mut Ctx<'_, f64>, x: &Tensor<f64>, t: &[f64]) -> Result<flowmac_tensor::Var> {
        let mut h = cx.tape.constant(self.input(x, t)?);
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(cx, h)?;
            if i + 1 < self.layers.len() {
                h = cx.tape.mish(h)?;
            }
        }
        Ok(h)
    }

    pub fn eval(&self, x: &Tensor<f64>, t: f64) -> Result<Tensor<f64>> {
        let mut cx = Ctx::inference(&self.params);
        let v = self.forward(&mut cx, x, &vec![t; x.shape()[0]])?;
        Ok(cx.tape.value(v).clone())
    }

    /// Integrates `n` samples from seeded noise.
    pub fn sample(&self, n: usize, sampler: &SamplerConfig) -> Result<(Tensor<f64>, usize)> {
        let out = euler_integrate(|x, t, _| self.eval(x, t), initial_noise(&[n, DIM], sampler.seed), sampler)?;
        Ok((out.x, out.nfe))
    }
}

/// Trains a field, returning it with the per-step loss.
pub fn train_toy_field(target: &ToyTarget, cfg: &ToyConfig) -> Result<(ToyField, Vec<f64>)> {
    let mut field = ToyField::new(cfg.hidden, cfg.time_dim, cfg.seed)?;
    let mut adam = Adam::new(AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    });
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut losses = Vec::with_capacity(cfg.train_steps);
    for step in 0..cfg.train_steps {
        let x1 = target.sample(cfg.batch_size, &mut rng);
        let x0 = standard_normal(&[cfg.batch_size, DIM], &mut rng);
        let t: Vec<f64> = (0..cfg.batch_size).map(|_| rng.random()).collect();
        let path = path_from(x0, x1, &t, cfg.sigma_min)?;
        let mut cx = Ctx::training(&field.params, 0);
        let v = field.forward(&mut cx, &path.x_t, &t)?;
        let loss = cfm_loss(&mut cx.tape, v, &path.u_target)?;
        let value = cx.tape.value(loss).item();
        losses.push(value);
        if !value.is_finite() {
            let tail = &losses[losses.len().saturating_sub(10)..];
            return Err(CodecError::NonFinite(format!("toy loss diverged at step {step}; last losses {tail:?}")));
        }
        let mut tape = cx.into_tape();
        tape.backward(loss)?;
        field.params.zero_grad();
        field.params.accumulate_grads(&tape);
        adam.step(&mut field.params)?;
    }
    Ok((field, losses))
}

#[derive(Debug, Clone)]
pub struct ToyReport {
    pub target_mean: [f64; 2],
    pub target_std: [f64; 2],
    pub mean: [f64; 2],
    pub std: [f64; 2],
    /// Sample covariance, row-major.
    pub cov: [[f64; 2]; 2],
    pub nfe: usize,
    pub losses: Vec<f64>,
    pub samples: Tensor<f64>,
}

impl ToyReport {
    pub fn mean_error(&self) -> f64 {
        (0..DIM).map(|d| (self.mean[d] - self.target_mean[d]).abs()).fold(0.0, f64::max)
    }

    pub fn std_error(&self) -> f64 {
        (0..DIM).map(|d| (self.std[d] - self.target_std[d]).abs()).fold(0.0, f64::max)
    }

    /// Larger of the mean and std errors.
    pub fn moment_error(&self) -> f64 {
        self.mean_error().max(self.std_error())
    }
}

/// Empirical moments of `samples: [n, 2]` against `target`.
pub fn toy_report(target: &ToyTarget, samples: Tensor<f64>, nfe: usize, losses: Vec<f64>) -> ToyReport {
    let n = samples.shape()[0] as f64;
    let mut mean = [0.0; 2];
    for row in samples.data().chunks(DIM) {
        mean[0] += row[0] / n;
        mean[1] += row[1] / n;
    }
    let mut cov = [[0.0; 2]; 2];
    for row in samples.data().chunks(DIM) {
        for a in 0..DIM {
            for b in 0..DIM {
                cov[a][b] += (row[a] - mean[a]) * (row[b] - mean[b]) / n;
            }
        }
    }
    let (target_mean, target_std) = target.moments();
    ToyReport {
        target_mean,
        target_std,
        mean,
        std: [cov[0][0].sqrt(), cov[1][1].sqrt()],
        cov,
        nfe,
        losses,
        samples,
    }
}

pub fn run_toy_benchmark(
    target: &ToyTarget,
    cfg: &ToyConfig,
    sample_count: usize,
    sampler: &SamplerConfig,
) -> Result<ToyReport> {
    let (field, losses) = train_toy_field(target, cfg)?;
    let (samples, nfe) = field.sample(sample_count, sampler)?;
    Ok(toy_report(target, samples, nfe, losses))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn targets_are_validated() {
        assert!(ToyTarget::single_gaussian([0.0, 0.0], [0.0, 1.0]).is_err());
        assert!(ToyTarget::two_gaussian_mixture([[0.0; 2], [1.0; 2]], [[1.0; 2]; 2], 1.5).is_err());
    }

    #[test]
    fn mixture_moments_match_closed_form_and_draws() {
        let t = ToyTarget::two_gaussian_mixture([[-2.0, 0.0], [2.0, 1.0]], [[0.5, 0.5], [0.5, 1.0]], 0.25).unwrap();
        let (m, s) = t.moments();
        assert!((m[0] - 1.0).abs() < 1e-12 && (m[1] - 0.75).abs() < 1e-12);
        let r = toy_report(&t, t.sample(40000, &mut ChaCha8Rng::seed_from_u64(0)), 0, vec![]);
        assert!((r.mean[0] - m[0]).abs() < 0.05 && (r.std[1] - s[1]).abs() < 0.05, "{r:?}");
    }

    #[test]
    fn short_training_lowers_loss() {
        let target = ToyTarget::single_gaussian([3.0, 3.0], [0.5, 0.5]).unwrap();
        let cfg = ToyConfig {
            train_steps: 300,
            ..ToyConfig::default()
        };
        let (_, losses) = train_toy_field(&target, &cfg).unwrap();
        let head = losses[..20].iter().sum::<f64>() / 20.0;
        let tail = losses[280..].iter().sum::<f64>() / 20.0;
        assert!(tail < 0.5 * head, "{head} -> {tail}");
    }
}
