use cpmts_core::jointdiag::{align_signed_permutation, ffdiag, JointDiagInstance};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn cond(m: &DMatrix<f64>) -> f64 {
    let sv = m.singular_values();
    let max = sv.iter().copied().fold(0.0, f64::max);
    let min = sv.iter().copied().fold(f64::INFINITY, f64::min);
    max / min
}

fn unit_theta(d: usize, max_cond: f64, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    loop {
        let mut t = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
        for mut c in t.column_iter_mut() {
            c.normalize_mut();
        }
        if cond(&t) <= max_cond {
            return t;
        }
    }
}

fn run(count: usize, seed: u64) -> (usize, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut failures = 0;
    let mut worst = 0.0f64;
    for i in 0..count {
        let d = 2 + i % 5;
        let theta = unit_theta(d, 50.0, &mut rng);
        let mats: Vec<_> = (0..d)
            .map(|_| {
                let g = DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0));
                &theta * DMatrix::from_diagonal(&g) * theta.transpose()
            })
            .collect();
        let inst = JointDiagInstance::new(mats).unwrap();
        let res = ffdiag(&inst).unwrap();
        let err = align_signed_permutation(&res.theta, &theta).unwrap().max_error;
        assert!(res.trace.windows(2).all(|w| w[1] <= w[0]));
        worst = worst.max(err);
        if err > 1e-6 {
            failures += 1;
            eprintln!("d={d} err={err:e} iters={} obj={:e} conv={}", res.iterations, res.objective, res.converged);
        }
    }
    (failures, worst)
}

#[test]
fn recovers_conditioned_mixtures() {
    let (failures, worst) = run(100, 2024);
    assert_eq!(failures, 0, "worst error {worst:e}");
}

#[test]
#[ignore]
fn stress() {
    let (failures, worst) = run(2000, 7);
    eprintln!("failures {failures}, worst {worst:e}");
    assert_eq!(failures, 0);
}
