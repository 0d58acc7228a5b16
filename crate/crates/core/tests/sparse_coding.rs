use ddl::rng::seeded;
use ddl::sparse_coding::{
    fista_encode, fista_encode_traced, kkt_check, reconstruction_objective, ElasticNetParams,
};
use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Cyclic projected coordinate descent for the nonnegative elastic net, run
/// until no coordinate moves by more than 1e-15.
fn coordinate_descent(d: ArrayView2<f64>, x: ArrayView1<f64>, lam: f64, lam2: f64) -> Array1<f64> {
    let k = d.ncols();
    let norms: Vec<f64> = d.columns().into_iter().map(|c| c.dot(&c)).collect();
    let mut a = Array1::<f64>::zeros(k);
    let mut r = x.to_owned();
    for _ in 0..200_000 {
        let mut moved = 0.0f64;
        for j in 0..k {
            let dj = d.column(j);
            let rho = dj.dot(&r) + norms[j] * a[j];
            let new = ((rho - lam) / (norms[j] + lam2)).max(0.0);
            let delta = new - a[j];
            if delta != 0.0 {
                r.scaled_add(-delta, &dj);
                a[j] = new;
                moved = moved.max(delta.abs());
            }
        }
        if moved < 1e-15 {
            break;
        }
    }
    a
}

fn random_instance(seed: u64) -> (Array2<f64>, Array1<f64>, ElasticNetParams) {
    let mut rng = seeded(seed);
    let m = rng.random_range(10..=30);
    let k = rng.random_range(20..=60);
    let mut d: Array2<f64> = Array2::from_shape_simple_fn((m, k), || StandardNormal.sample(&mut rng));
    for mut c in d.columns_mut() {
        let n = c.dot(&c).sqrt();
        c /= n;
    }
    let x: Array1<f64> = Array1::from_shape_simple_fn(m, || StandardNormal.sample(&mut rng));
    let p = ElasticNetParams::new(rng.random_range(0.05..0.5), rng.random_range(0.01..0.5))
        .unwrap()
        .with_tol(1e-12)
        .with_max_iters(20_000);
    (d, x, p)
}

#[test]
fn fista_matches_coordinate_descent_on_100_instances() {
    let mut worst = 0.0f64;
    for seed in 0..100 {
        let (d, x, p) = random_instance(seed);
        let code = fista_encode(d.view(), x.view(), &p).unwrap();
        let cd = coordinate_descent(d.view(), x.view(), p.lambda, p.lambda_prime);
        let obj_cd = reconstruction_objective(d.view(), x.view(), cd.view(), &p).unwrap();
        let gap = (code.objective - obj_cd).abs();
        worst = worst.max(gap);
        assert!(gap <= 1e-8, "seed {seed}: fista {} cd {}", code.objective, obj_cd);
        assert!(code.converged, "seed {seed}");
        assert!(kkt_check(d.view(), x.view(), &code, &p, 10.0 * p.tol.max(1e-10)), "seed {seed}");
    }
    println!("worst objective gap {worst:.3e}");
}

proptest! {
    #![proptest_config(ProptestConfig {
        cases: 120,
        failure_persistence: None,
        ..ProptestConfig::default()
    })]

    #[test]
    fn converged_codes_satisfy_kkt(seed in any::<u64>()) {
        let (d, x, p) = random_instance(seed);
        let p = p.with_tol(1e-10);
        let code = fista_encode(d.view(), x.view(), &p).unwrap();
        prop_assume!(code.converged);
        prop_assert!(kkt_check(d.view(), x.view(), &code, &p, 10.0 * p.tol));
    }

    #[test]
    fn never_worse_than_zero_and_nonnegative(seed in any::<u64>()) {
        let (d, x, p) = random_instance(seed);
        let code = fista_encode(d.view(), x.view(), &p.with_tol(1e-8)).unwrap();
        let zero = Array1::zeros(d.ncols());
        let obj0 = reconstruction_objective(d.view(), x.view(), zero.view(), &p).unwrap();
        prop_assert!(code.objective <= obj0);
        prop_assert!(code.coeffs.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn best_objective_trace_is_nonincreasing(seed in any::<u64>()) {
        let (d, x, p) = random_instance(seed);
        let (_, trace) = fista_encode_traced(d.view(), x.view(), &p.with_max_iters(300)).unwrap();
        prop_assert!(!trace.is_empty());
        for w in trace.windows(2) {
            prop_assert!(w[1] <= w[0]);
        }
    }
}
