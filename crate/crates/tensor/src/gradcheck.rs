//! Central finite-difference checks of tape gradients in f64.
//!
//! Each case builds a small graph from random inputs; the scalar objective
//! is `sum(out * w)` with a fixed random weighting `w`, so every output
//! element contributes with a distinct factor.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Gradients smaller than this are compared in absolute terms.
pub const MAGNITUDE_FLOOR: f64 = 1e-3;

pub type Build = dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>;

pub struct OpCase {
    pub name: &'static str,
    pub shapes: Vec<Vec<usize>>,
    /// Inputs are drawn uniformly from this range.
    pub range: (f64, f64),
    pub build: Box<Build>,
}

impl OpCase {
    pub fn new(
        name: &'static str,
        shapes: &[&[usize]],
        range: (f64, f64),
        build: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'static,
    ) -> Self {
        OpCase {
            name,
            shapes: shapes.iter().map(|s| s.to_vec()).collect(),
            range,
            build: Box::new(build),
        }
    }
}

/// `|a - n| / max(|a|, |n|, MAGNITUDE_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(MAGNITUDE_FLOOR)
}

#[derive(Debug, Clone)]
pub struct CheckReport {
    pub name: &'static str,
    pub worst: f64,
    pub entries: usize,
    /// First entry over tolerance, if any.
    pub failure: Option<String>,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.failure.is_none()
    }
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi))
}

fn objective(case: &OpCase, inputs: &[Tensor<f64>], w: &mut Option<Tensor<f64>>, rng: &mut ChaCha8Rng) -> Result<(f64, Vec<Tensor<f64>>)> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
    let out = (case.build)(&mut tape, &vars)?;
    let shape = tape.shape(out).to_vec();
    let weights = w.get_or_insert_with(|| random(rng, &shape, -1.0, 1.0)).clone();
    let wv = tape.constant(weights);
    let prod = tape.mul(out, wv)?;
    let loss = tape.sum(prod);
    let value = tape.value(loss).item();
    tape.backward(loss)?;
    let grads = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
        .collect();
    Ok((value, grads))
}

/// Checks every input element of `case` over `seeds` random draws.
pub fn check_case(case: &OpCase, seeds: u64) -> Result<CheckReport> {
    let mut report = CheckReport {
        name: case.name,
        worst: 0.0,
        entries: 0,
        failure: None,
    };
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed * 7919 + case.name.len() as u64);
        let inputs: Vec<Tensor<f64>> = case.shapes.iter().map(|s| random(&mut rng, s, case.range.0, case.range.1)).collect();
        let mut w = None;
        let (_, analytic) = objective(case, &inputs, &mut w, &mut rng)?;
        for (i, input) in inputs.iter().enumerate() {
            for j in 0..input.numel() {
                let mut plus = inputs.clone();
                plus[i].data_mut()[j] += STEP;
                let mut minus = inputs.clone();
                minus[i].data_mut()[j] -= STEP;
                let (fp, _) = objective(case, &plus, &mut w, &mut rng)?;
                let (fm, _) = objective(case, &minus, &mut w, &mut rng)?;
                let numeric = (fp - fm) / (2.0 * STEP);
                let a = analytic[i].data()[j];
                let rel = relative_error(a, numeric);
                report.worst = report.worst.max(rel);
                report.entries += 1;
                if rel >= TOLERANCE && report.failure.is_none() {
                    report.failure = Some(format!(
                        "seed {seed} input {i} elem {j}: analytic {a} vs numeric {numeric} (rel {rel:e})"
                    ));
                }
            }
        }
    }
    Ok(report)
}

/// One case per differentiable tape operation (and per distinct code path
/// where an op has several, such as broadcasting or strided convolution).
pub fn op_cases() -> Vec<OpCase> {
    let r = (-1.0, 1.0);
    let mask = Tensor::from_f64(vec![2, 3], &[0.0, 2.0, 2.0, 0.0, 2.0, 0.0]).expect("mask shape");
    vec![
        OpCase::new("add", &[&[3, 4], &[4]], r, |t, v| t.add(v[0], v[1])),
        OpCase::new("sub", &[&[2, 3, 4], &[2, 1, 4]], r, |t, v| t.sub(v[0], v[1])),
        OpCase::new("mul", &[&[2, 3, 4], &[3, 1]], r, |t, v| t.mul(v[0], v[1])),
        OpCase::new("div", &[&[3, 4], &[3, 4]], (0.5, 2.0), |t, v| t.div(v[0], v[1])),
        OpCase::new("div_bcast", &[&[2, 3], &[3]], (0.5, 2.0), |t, v| t.div(v[0], v[1])),
        OpCase::new("exp", &[&[2, 5]], r, |t, v| Ok(t.exp(v[0]))),
        OpCase::new("log", &[&[2, 5]], (0.2, 3.0), |t, v| Ok(t.log(v[0]))),
        OpCase::new("tanh", &[&[2, 5]], (-2.0, 2.0), |t, v| Ok(t.tanh(v[0]))),
        OpCase::new("sigmoid", &[&[2, 5]], (-3.0, 3.0), |t, v| Ok(t.sigmoid(v[0]))),
        OpCase::new("sin", &[&[2, 5]], (-3.0, 3.0), |t, v| Ok(t.sin(v[0]))),
        OpCase::new("cos", &[&[2, 5]], (-3.0, 3.0), |t, v| Ok(t.cos(v[0]))),
        OpCase::new("powf", &[&[2, 5]], (0.3, 2.0), |t, v| Ok(t.powf(v[0], 2.5))),
        OpCase::new("square", &[&[2, 5]], r, |t, v| Ok(t.square(v[0]))),
        OpCase::new("softplus", &[&[2, 5]], (-4.0, 4.0), |t, v| Ok(t.softplus(v[0]))),
        // Inputs kept away from the kinks at 0.
        OpCase::new("relu", &[&[2, 5]], (0.1, 1.0), |t, v| {
            let n = t.neg(v[0]);
            let a = t.relu(v[0]);
            let b = t.relu(n);
            t.add(a, b)
        }),
        OpCase::new("abs", &[&[2, 5]], (0.1, 1.0), |t, v| {
            let n = t.neg(v[0]);
            Ok(t.abs(n))
        }),
        OpCase::new("scale", &[&[4]], r, |t, v| {
            let s = t.scale(v[0], 3.5);
            Ok(t.add_scalar(s, 0.25))
        }),
        OpCase::new("mish", &[&[3, 4]], (-3.0, 3.0), |t, v| t.mish(v[0])),
        OpCase::new("sum", &[&[3, 4]], r, |t, v| Ok(t.sum(v[0]))),
        OpCase::new("mean", &[&[3, 4]], r, |t, v| Ok(t.mean(v[0]))),
        OpCase::new("sum_axis", &[&[2, 3, 4]], r, |t, v| t.sum_axis(v[0], 1, false)),
        OpCase::new("mean_axis", &[&[2, 3, 4]], r, |t, v| t.mean_axis(v[0], 2, true)),
        OpCase::new("matmul", &[&[3, 4], &[4, 5]], r, |t, v| t.matmul(v[0], v[1])),
        OpCase::new("matmul_shared", &[&[2, 3, 4], &[4, 2]], r, |t, v| t.matmul(v[0], v[1])),
        OpCase::new("matmul_batch", &[&[2, 3, 4], &[2, 4, 2]], r, |t, v| t.matmul(v[0], v[1])),
        OpCase::new("matmul_nt", &[&[2, 3, 4], &[2, 5, 4]], r, |t, v| t.matmul_nt(v[0], v[1])),
        OpCase::new("matmul_nt2d", &[&[3, 4], &[2, 4]], r, |t, v| t.matmul_nt(v[0], v[1])),
        OpCase::new("conv1d_k3", &[&[2, 5, 3], &[3, 3, 4]], r, |t, v| t.conv1d(v[0], v[1], 1, 1)),
        OpCase::new("conv1d_s2", &[&[2, 6, 2], &[3, 2, 3]], r, |t, v| t.conv1d(v[0], v[1], 2, 1)),
        OpCase::new("conv1d_k1", &[&[1, 4, 3], &[1, 3, 2]], r, |t, v| t.conv1d(v[0], v[1], 1, 0)),
        OpCase::new("transpose", &[&[2, 3, 4]], r, |t, v| t.transpose(v[0])),
        OpCase::new("permute", &[&[2, 3, 4, 2]], r, |t, v| t.permute(v[0], &[0, 2, 1, 3])),
        OpCase::new("reshape", &[&[2, 6]], r, |t, v| t.reshape(v[0], &[3, 4])),
        OpCase::new("concat", &[&[2, 3, 2], &[2, 3, 3]], r, |t, v| t.concat(&[v[0], v[1]], 2)),
        OpCase::new("concat_t", &[&[2, 1, 2], &[2, 3, 2]], r, |t, v| t.concat(&[v[0], v[1]], 1)),
        OpCase::new("slice", &[&[2, 5, 3]], r, |t, v| t.slice(v[0], 1, 1, 3)),
        OpCase::new("repeat_axis", &[&[2, 3, 2]], r, |t, v| t.repeat_axis(v[0], 1, 2)),
        OpCase::new("softmax", &[&[3, 5]], (-2.0, 2.0), |t, v| t.softmax(v[0])),
        OpCase::new("layer_norm", &[&[3, 6], &[6], &[6]], r, |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5)),
        OpCase::new("group_norm", &[&[2, 3, 4], &[4], &[4]], r, |t, v| t.group_norm(v[0], v[1], v[2], 2, 1e-5)),
        OpCase::new("mask_mul", &[&[2, 3]], r, move |t, v| t.mask_mul(v[0], &mask)),
    ]
}
