//! Euler integration of a learned vector field with classifier-free
//! guidance and exact accounting of network evaluations.

use flowmac_tensor::{Real, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cfm::standard_normal;
use crate::config::SamplerConfig;
use crate::error::{CodecError, Result};

/// Which branch of the field a call evaluates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Conditional,
    Unconditional,
}

#[derive(Debug, Clone)]
pub struct SampleOutput<T: Real> {
    pub x: Tensor<T>,
    /// Number of field evaluations actually made.
    pub nfe: usize,
}

/// `v_u + g (v_c - v_u)`.
pub fn guided_field<T: Real>(v_cond: &Tensor<T>, v_uncond: &Tensor<T>, g: f64) -> Result<Tensor<T>> {
    let g = T::of(g);
    Ok(v_cond.zip_with(v_uncond, "guided_field", |c, u| u + g * (c - u))?)
}

/// Initial state `x0 ~ N(0, I)` from `seed`.
pub fn initial_noise<T: Real>(shape: &[usize], seed: u64) -> Tensor<T> {
    standard_normal(shape, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Integrates `dx/dt = v(x, t)` from `t = 0` to `1` on the uniform grid
/// `t_k = k / steps`. With guidance on, each step evaluates both branches.
pub fn euler_integrate<T: Real>(
    mut field: impl FnMut(&Tensor<T>, f64, Branch) -> Result<Tensor<T>>,
    x0: Tensor<T>,
    cfg: &SamplerConfig,
) -> Result<SampleOutput<T>> {
    if cfg.steps == 0 {
        return Err(CodecError::Invalid("sampler needs at least one step".into()));
    }
    let dt = T::of(1.0 / cfg.steps as f64);
    let mut x = x0;
    let mut nfe = 0;
    for k in 0..cfg.steps {
        let t = k as f64 / cfg.steps as f64;
        let v = field(&x, t, Branch::Conditional)?;
        nfe += 1;
        let v = if cfg.cfg_enabled {
            let vu = field(&x, t, Branch::Unconditional)?;
            nfe += 1;
            guided_field(&v, &vu, cfg.cfg_factor)?
        } else {
            v
        };
        x = x.zip_with(&v, "euler_step", |a, b| a + dt * b)?;
        if !x.is_finite() {
            return Err(CodecError::NonFinite(format!("sampler state at step {k}")));
        }
    }
    Ok(SampleOutput { x, nfe })
}

/// One conditional Euler step from `t = 0`: `x0 + v(x0, 0, c)`.
pub fn single_step_sample<T: Real>(
    field: impl FnMut(&Tensor<T>, f64, Branch) -> Result<Tensor<T>>,
    x0: Tensor<T>,
) -> Result<SampleOutput<T>> {
    euler_integrate(field, x0, &SamplerConfig::single_step(0))
}
