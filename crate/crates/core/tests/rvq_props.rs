use flowmac_core::config::RvqConfig;
use flowmac_core::quantizer::{perplexity, Rvq};
use flowmac_core::CodeGrid;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random books whose first codeword is the origin, so no stage can make
/// the residual worse.
fn zero_containing_books(rng: &mut ChaCha8Rng, stages: usize, size: usize, dim: usize) -> Rvq {
    let books = (0..stages)
        .map(|s| {
            let scale = 2.0 / (s + 1) as f64;
            (0..size)
                .map(|k| {
                    if k == 0 {
                        vec![0.0; dim]
                    } else {
                        (0..dim).map(|_| rng.random_range(-scale..scale)).collect()
                    }
                })
                .collect()
        })
        .collect();
    Rvq::from_books(books).unwrap()
}

#[test]
fn error_never_increases_with_more_stages() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..50 {
        let dim = rng.random_range(1..5);
        let size = rng.random_range(2..17);
        let rvq = zero_containing_books(&mut rng, 6, size, dim);
        let z: Vec<f64> = (0..40 * dim).map(|_| rng.random_range(-3.0..3.0)).collect();
        let mut last = f64::INFINITY;
        for active in 1..=6 {
            let q = rvq.quantize(&z, active).unwrap();
            let residual: f64 = z.iter().zip(&q.values).map(|(a, b)| (a - b).powi(2)).sum();
            assert!(residual <= last + 1e-12, "stage {active}: {residual} > {last}");
            last = residual;
        }
    }
}

#[test]
fn one_dimensional_worked_example() {
    let rvq = Rvq::from_books(vec![vec![vec![-1.0], vec![1.0]], vec![vec![-0.5], vec![0.5]]]).unwrap();
    let q = rvq.quantize(&[0.6], 2).unwrap();
    assert_eq!(q.codes.indices(), &[1, 0]);
    assert!((q.values[0] - 0.5).abs() < 1e-15);
    let again = rvq.encode(&rvq.decode(&q.codes).unwrap(), 2).unwrap();
    assert_eq!(again, q.codes);
}

#[test]
fn ties_go_to_the_lowest_index_every_time() {
    // 0 is equidistant from -1 and +1, and (0, 0) from all four corners.
    let rvq = Rvq::from_books(vec![vec![vec![1.0], vec![-1.0], vec![3.0]]]).unwrap();
    for _ in 0..10 {
        assert_eq!(rvq.encode(&[0.0], 1).unwrap().indices(), &[0]);
    }
    let corners = vec![vec![1.0, 1.0], vec![-1.0, 1.0], vec![1.0, -1.0], vec![-1.0, -1.0]];
    let rvq = Rvq::from_books(vec![corners.clone(), corners]).unwrap();
    let codes = rvq.encode(&[0.0, 0.0, 0.0, 0.0], 2).unwrap();
    assert_eq!(codes.frame(0), codes.frame(1));
    assert_eq!(codes.frame(0)[0], 0);
}

#[test]
fn indices_stay_in_range_and_bad_codes_are_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..200 {
        let size = rng.random_range(1..40);
        let dim = rng.random_range(1..4);
        let stages = rng.random_range(1..5);
        let books = (0..stages)
            .map(|_| (0..size).map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()).collect())
            .collect();
        let rvq = Rvq::from_books(books).unwrap();
        let z: Vec<f64> = (0..10 * dim).map(|_| rng.random_range(-1e6..1e6)).collect();
        let codes = rvq.encode(&z, stages).unwrap();
        assert!(codes.indices().iter().all(|&k| (k as usize) < size));
        let mut bad = codes.indices().to_vec();
        let at = rng.random_range(0..bad.len());
        bad[at] = size as u32;
        let bad = CodeGrid::new(codes.frames(), codes.stages(), bad).unwrap();
        assert!(rvq.decode(&bad).is_err());
    }
}

#[test]
fn ema_codewords_converge_to_cluster_means() {
    let cfg = RvqConfig {
        stages: 1,
        codebook_size: 2,
        proj_dim: 2,
        ..RvqConfig::default()
    };
    let mut rvq = Rvq::new(&cfg);
    rvq.books[0] = vec![-5.0, 0.0, 5.0, 0.0];
    rvq.initialized = true;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut points: Vec<[f64; 2]> = (0..64)
        .map(|i| {
            let c = if i % 2 == 0 { -2.0 } else { 2.0 };
            [c + rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)]
        })
        .collect();
    let mean_of = |sign: f64| {
        let sel: Vec<_> = points.iter().filter(|p| p[0].signum() == sign).collect();
        let n = sel.len() as f64;
        [sel.iter().map(|p| p[0]).sum::<f64>() / n, sel.iter().map(|p| p[1]).sum::<f64>() / n]
    };
    let (left, right) = (mean_of(-1.0), mean_of(1.0));
    for _ in 0..500 {
        points.shuffle(&mut rng);
        let z: Vec<f64> = points.iter().flatten().copied().collect();
        let q = rvq.quantize(&z, 1).unwrap();
        rvq.ema_update(&q, &mut rng);
    }
    let b = &rvq.books[0];
    for j in 0..2 {
        assert!((b[j] - left[j]).abs() < 1e-3, "{b:?} vs {left:?}");
        assert!((b[2 + j] - right[j]).abs() < 1e-3, "{b:?} vs {right:?}");
    }
}

#[test]
fn perplexity_tracks_usage() {
    let uniform = CodeGrid::new(8, 1, (0..8).collect()).unwrap();
    assert!((perplexity(&uniform, 8)[0] - 8.0).abs() < 1e-12);
    let collapsed = CodeGrid::new(8, 1, vec![3; 8]).unwrap();
    assert_eq!(perplexity(&collapsed, 8)[0], 1.0);
}
