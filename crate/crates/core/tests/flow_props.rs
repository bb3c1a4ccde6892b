use flowmac_core::cfm::{ot_vector_field, sample_path, sample_timestep_logit_normal};
use flowmac_core::sampler::{euler_integrate, single_step_sample, Branch};
use flowmac_core::SamplerConfig;
use flowmac_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

#[test]
fn path_derivative_matches_the_conditional_field() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for sigma in [0.0, 1e-4, 0.1] {
        let mut worst: f64 = 0.0;
        for _ in 0..200 {
            let x1 = Tensor::from_fn(vec![1, 6], |_| rng.random_range(-3.0..3.0));
            let t = rng.random_range(0.0..0.999);
            let p = sample_path(&x1, &[t], sigma, &mut rng).unwrap();
            // d/dt [(1 - (1 - s) t) x0 + t x1] = x1 - (1 - s) x0
            let dxdt: Vec<f64> = p.x0.data().iter().zip(x1.data()).map(|(a, b)| b - (1.0 - sigma) * a).collect();
            let field = ot_vector_field(&p.x_t, &x1, t, sigma).unwrap();
            for ((d, f), u) in dxdt.iter().zip(field.data()).zip(p.u_target.data()) {
                worst = worst.max(rel(*d, *f));
                assert_eq!(d, u);
            }
        }
        assert!(worst < 1e-10, "sigma {sigma}: worst relative error {worst:e}");
    }
}

#[test]
fn path_endpoints() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x1 = Tensor::from_fn(vec![1, 5], |i| i as f64 - 2.0);
    let p = sample_path(&x1, &[0.0], 1e-4, &mut rng).unwrap();
    assert_eq!(p.x_t, p.x0);
    let p = sample_path(&x1, &[1.0], 0.0, &mut rng).unwrap();
    assert_eq!(p.x_t, x1);
    let p = sample_path(&x1, &[1.0], 1e-4, &mut rng).unwrap();
    for ((x, a), b) in p.x_t.data().iter().zip(p.x0.data()).zip(x1.data()) {
        assert!((x - (1e-4 * a + b)).abs() < 1e-15);
    }
    assert!(ot_vector_field(&x1, &x1, 1.0, 0.0).is_err());
}

#[test]
fn timesteps_stay_strictly_inside_the_interval() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..100_000 {
        let t = sample_timestep_logit_normal(&mut rng, 0.0, 3.0).unwrap();
        assert!(t > 0.0 && t < 1.0);
    }
}

fn sampler(steps: usize) -> SamplerConfig {
    SamplerConfig {
        steps,
        cfg_enabled: false,
        ..SamplerConfig::default()
    }
}

#[test]
fn constant_field_is_integrated_exactly() {
    let x0 = Tensor::new(vec![4], vec![0.5, -1.25, 3.0, 0.0]).unwrap();
    let c = Tensor::new(vec![4], vec![0.75, 2.0, -0.125, 1.5]).unwrap();
    for steps in [1, 2, 4, 8, 16, 32, 64] {
        let out = euler_integrate(|_, _, _| Ok(c.clone()), x0.clone(), &sampler(steps)).unwrap();
        assert_eq!(out.x, x0.add(&c).unwrap(), "{steps} steps");
    }
    // Non-dyadic values only round.
    let c = Tensor::new(vec![2], vec![0.1, 1.0 / 3.0]).unwrap();
    let x0 = Tensor::new(vec![2], vec![0.3, -0.7]).unwrap();
    for steps in [3, 10, 32] {
        let out = euler_integrate(|_, _, _| Ok(c.clone()), x0.clone(), &sampler(steps)).unwrap();
        for (o, e) in out.x.data().iter().zip(x0.add(&c).unwrap().data()) {
            let (o, e): (f64, f64) = (*o, *e);
            assert!((o - e).abs() < 1e-12);
        }
    }
}

#[test]
fn linear_field_matches_closed_form_and_converges_at_first_order() {
    let x0 = Tensor::new(vec![3], vec![1.0, -0.5, 2.0]).unwrap();
    let mut errors = Vec::new();
    for steps in [8usize, 16, 32, 64] {
        let out = euler_integrate(|x, _, _| Ok(x.clone()), x0.clone(), &sampler(steps)).unwrap();
        let growth = (1.0 + 1.0 / steps as f64).powi(steps as i32);
        let mut err: f64 = 0.0;
        for (o, a) in out.x.data().iter().zip(x0.data()) {
            assert!((o - growth * a).abs() < 1e-9);
            err = err.max((o - std::f64::consts::E * a).abs());
        }
        errors.push(err);
    }
    for w in errors.windows(2) {
        let ratio = w[1] / w[0];
        assert!((ratio - 0.5).abs() < 0.1, "error ratio {ratio} over {errors:?}");
    }
}

#[test]
fn nfe_counts_every_field_evaluation() {
    let x0 = Tensor::new(vec![2], vec![0.0, 0.0]).unwrap();
    let default = SamplerConfig::default();
    let mut calls = 0;
    let out = euler_integrate(
        |x, _, _| {
            calls += 1;
            Ok(x.clone())
        },
        x0.clone(),
        &default,
    )
    .unwrap();
    assert_eq!((out.nfe, calls, default.nfe()), (64, 64, 64));

    let mut branches = Vec::new();
    let out = single_step_sample(
        |x, _, b| {
            branches.push(b);
            Ok(x.clone())
        },
        x0,
    )
    .unwrap();
    assert_eq!(out.nfe, 1);
    assert_eq!(branches, vec![Branch::Conditional]);
    assert_eq!(SamplerConfig::single_step(0).nfe(), 1);
}
