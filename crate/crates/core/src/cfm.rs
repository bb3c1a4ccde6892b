//! Conditional flow matching with the optimal-transport Gaussian path
//! `x_t = (1 - (1 - s) t) x0 + t x1`, where `s` is `sigma_min`.

use flowmac_tensor::{Real, Tape, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{CodecError, Result};

/// A draw from the conditional path for a batch `[B, ...]` with one `t`
/// per batch item.
#[derive(Debug, Clone, PartialEq)]
pub struct PathSample {
    pub x0: Tensor<f64>,
    pub x1: Tensor<f64>,
    pub t: Vec<f64>,
    pub x_t: Tensor<f64>,
    /// `x1 - (1 - sigma_min) x0`
    pub u_target: Tensor<f64>,
}

fn per_item(shape: &[usize], t: &[f64]) -> Result<usize> {
    let b = shape.first().copied().unwrap_or(1);
    if t.len() != b {
        return Err(CodecError::Invalid(format!("{} timesteps for a batch of {b}", t.len())));
    }
    if let Some(bad) = t.iter().find(|t| !(0.0..=1.0).contains(*t)) {
        return Err(CodecError::Invalid(format!("timestep {bad} outside [0, 1]")));
    }
    Ok(shape.iter().skip(1).product())
}

/// Builds the path sample for given noise `x0`.
pub fn path_from(x0: Tensor<f64>, x1: Tensor<f64>, t: &[f64], sigma_min: f64) -> Result<PathSample> {
    if x0.shape() != x1.shape() {
        return Err(CodecError::Invalid(format!("x0 {:?} vs x1 {:?}", x0.shape(), x1.shape())));
    }
    let item = per_item(x1.shape(), t)?;
    let k = 1.0 - sigma_min;
    let x_t = Tensor::from_fn(x1.shape().to_vec(), |i| {
        let ti = t[i / item.max(1)];
        (1.0 - k * ti) * x0.data()[i] + ti * x1.data()[i]
    });
    let u_target = Tensor::from_fn(x1.shape().to_vec(), |i| x1.data()[i] - k * x0.data()[i]);
    Ok(PathSample {
        x0,
        x1,
        t: t.to_vec(),
        x_t,
        u_target,
    })
}

/// Draws `x0 ~ N(0, I)` and returns the path sample at `t`.
pub fn sample_path(x1: &Tensor<f64>, t: &[f64], sigma_min: f64, rng: &mut ChaCha8Rng) -> Result<PathSample> {
    let x0 = standard_normal(x1.shape(), rng);
    path_from(x0, x1.clone(), t, sigma_min)
}

pub fn standard_normal<T: Real>(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<T> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let z: f64 = StandardNormal.sample(rng);
        T::of(z)
    })
}

/// `(x1 - (1 - s) x) / (1 - (1 - s) t)` for a single `t`.
pub fn ot_vector_field(x: &Tensor<f64>, x1: &Tensor<f64>, t: f64, sigma_min: f64) -> Result<Tensor<f64>> {
    let k = 1.0 - sigma_min;
    let denom = 1.0 - k * t;
    if denom <= 1e-12 {
        return Err(CodecError::Invalid(format!(
            "vector field undefined at t = {t} with sigma_min = {sigma_min}"
        )));
    }
    Ok(x1.zip_with(x, "ot_vector_field", |a, b| (a - k * b) / denom)?)
}

/// Mean squared error between the predicted field and the path target.
pub fn cfm_loss<T: Real>(tape: &mut Tape<T>, v_pred: Var, target: &Tensor<T>) -> Result<Var> {
    if tape.shape(v_pred) != target.shape() {
        return Err(CodecError::Invalid(format!(
            "prediction {:?} vs target {:?}",
            tape.shape(v_pred),
            target.shape()
        )));
    }
    let u = tape.constant(target.clone());
    let d = tape.sub(v_pred, u)?;
    let sq = tape.square(d);
    Ok(tape.mean(sq))
}

/// `sigmoid(z)` with `z ~ N(m, s^2)`, nudged off the endpoints so the
/// result always lies strictly inside `(0, 1)`.
pub fn sample_timestep_logit_normal(rng: &mut ChaCha8Rng, m: f64, s: f64) -> Result<f64> {
    if !(s > 0.0) {
        return Err(CodecError::Invalid("logit-normal scale must be positive".into()));
    }
    let normal = Normal::new(m, s).map_err(|e| CodecError::Invalid(format!("logit-normal: {e}")))?;
    let z: f64 = normal.sample(rng);
    let t = 1.0 / (1.0 + (-z).exp());
    Ok(t.clamp(f64::EPSILON, 1.0 - f64::EPSILON))
}

/// Classifier-free-guidance dropout: `None` (the unconditional marker) with
/// probability `p_g`, otherwise the condition unchanged.
pub fn apply_cfg_dropout<C>(c: C, p_g: f64, rng: &mut ChaCha8Rng) -> Option<C> {
    if rng.random::<f64>() < p_g {
        None
    } else {
        Some(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    fn t1(v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(vec![1, v.len()], v).unwrap()
    }

    #[test]
    fn path_endpoints() {
        let x1 = t1(&[0.5, -2.0, 3.0]);
        let s = sample_path(&x1, &[0.0], 1e-4, &mut rng()).unwrap();
        assert_eq!(s.x_t, s.x0);
        let s = sample_path(&x1, &[1.0], 0.0, &mut rng()).unwrap();
        assert_eq!(s.x_t, x1);
        let s = sample_path(&x1, &[1.0], 1e-4, &mut rng()).unwrap();
        for i in 0..3 {
            let expect = 1e-4 * s.x0.data()[i] + x1.data()[i];
            assert!((s.x_t.data()[i] - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn vector_field_examples() {
        let x1 = t1(&[1.0, -1.0]);
        for t in [0.0, 0.3, 0.99] {
            let u = ot_vector_field(&x1, &x1, t, 0.0).unwrap();
            assert!(u.data().iter().all(|&v| v == 0.0));
        }
        let u = ot_vector_field(&t1(&[0.0, 0.0]), &x1, 0.0, 1e-4).unwrap();
        assert_eq!(u, x1);
        let u = ot_vector_field(&t1(&[1.0]), &t1(&[2.0]), 0.5, 0.0).unwrap();
        assert_eq!(u.item(), 2.0);
        assert!(ot_vector_field(&t1(&[1.0]), &t1(&[2.0]), 1.0, 0.0).is_err());
    }

    #[test]
    fn loss_examples_and_gradient() {
        let target = Tensor::from_f64(vec![2, 2], &[1.0, -1.0, 0.5, 2.0]).unwrap();
        let mut tape = Tape::<f64>::new();
        let v = tape.variable(target.clone());
        let l = cfm_loss(&mut tape, v, &target).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);

        let mut tape = Tape::<f64>::new();
        let v = tape.variable(target.map(|x| x + 1.0));
        let l = cfm_loss(&mut tape, v, &target).unwrap();
        assert_eq!(tape.value(l).item(), 1.0);
        tape.backward(l).unwrap();
        // 2 (v - u) / count
        assert!(tape.grad(v).unwrap().data().iter().all(|&g| g == 0.5));
    }

    #[test]
    fn constant_predictor_minimizer_is_target_mean() {
        let target = Tensor::from_f64(vec![4], &[1.0, 2.0, 4.0, -3.0]).unwrap();
        let mut c = 0.0;
        for _ in 0..200 {
            let mut tape = Tape::<f64>::new();
            let cv = tape.variable(Tensor::scalar(c));
            let ones = tape.constant(Tensor::ones(vec![4]));
            let v = tape.mul(ones, cv).unwrap();
            let l = cfm_loss(&mut tape, v, &target).unwrap();
            tape.backward(l).unwrap();
            c -= 0.25 * tape.grad(cv).unwrap().item();
        }
        assert!((c - 1.0).abs() < 1e-9);
    }

    #[test]
    fn logit_normal_timesteps() {
        let mut r = rng();
        let mut draws: Vec<f64> = (0..100_000).map(|_| sample_timestep_logit_normal(&mut r, 0.0, 1.0).unwrap()).collect();
        assert!(draws.iter().all(|&t| t > 0.0 && t < 1.0));
        draws.sort_by(f64::total_cmp);
        let median = draws[50_000];
        assert!((median - 0.5).abs() < 0.01, "median {median}");
        let far = sample_timestep_logit_normal(&mut r, 80.0, 1e-3).unwrap();
        assert!(far < 1.0);
        assert!(sample_timestep_logit_normal(&mut r, 0.0, 0.0).is_err());
    }

    #[test]
    fn cfg_dropout_rates() {
        let mut r = rng();
        assert!((0..1000).all(|_| apply_cfg_dropout(1, 0.0, &mut r).is_some()));
        assert!((0..1000).all(|_| apply_cfg_dropout(1, 1.0, &mut r).is_none()));
        let dropped = (0..100_000).filter(|_| apply_cfg_dropout(1, 0.2, &mut r).is_none()).count();
        let frac = dropped as f64 / 100_000.0;
        assert!((frac - 0.2).abs() < 0.005, "{frac}");
    }
}
