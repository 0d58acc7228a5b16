use ddl::classifier::{
    argmax_columns, linear_scores, loss_and_grads, predict_labels, ClassifierParams, LabelMatrix,
};
use ddl::rng::seeded;
use ndarray::{concatenate, Array2, Axis};
use proptest::prelude::*;
use rand::Rng;

fn loss_of(w: &Array2<f64>, lc: f64, x: &Array2<f64>, y: &LabelMatrix) -> f64 {
    let p = ClassifierParams::new(w.clone(), lc).unwrap();
    loss_and_grads(&p, x.view(), y.view()).unwrap().loss
}

/// Random instance whose pre-activations stay at least 1e-3 away from zero.
fn instance(seed: u64) -> (Array2<f64>, Array2<f64>, Vec<usize>, f64) {
    let mut rng = seeded(seed);
    loop {
        let c = rng.random_range(2..5);
        let f = rng.random_range(1..6);
        let n = rng.random_range(1..5);
        let w: Array2<f64> = Array2::from_shape_simple_fn((c, f), || rng.random_range(-1.0..1.0));
        let x: Array2<f64> = Array2::from_shape_simple_fn((f, n), || rng.random_range(0.0..1.0));
        if w.dot(&x).iter().all(|z| z.abs() >= 1e-3) {
            let labels = (0..n).map(|_| rng.random_range(0..c)).collect();
            return (w, x, labels, rng.random_range(0.0..0.1));
        }
    }
}

#[test]
fn gradients_match_central_differences() {
    // the loss is piecewise quadratic, so a larger step costs no truncation
    // error while every perturbed score stays on the same side of zero
    let h = 1e-4;
    for seed in 0..60 {
        let (w, x, labels, lc) = instance(seed);
        let y = LabelMatrix::one_hot(&labels, w.nrows()).unwrap();
        let p = ClassifierParams::new(w.clone(), lc).unwrap();
        let g = loss_and_grads(&p, x.view(), y.view()).unwrap();
        let check = |analytic: f64, plus: f64, minus: f64| {
            let numeric = (plus - minus) / (2.0 * h);
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
            assert!(rel <= 1e-6, "seed {seed}: {analytic} vs {numeric}");
        };
        for ((i, j), &a) in g.d_weights.indexed_iter() {
            let (mut wp, mut wm) = (w.clone(), w.clone());
            wp[[i, j]] += h;
            wm[[i, j]] -= h;
            check(a, loss_of(&wp, lc, &x, &y), loss_of(&wm, lc, &x, &y));
        }
        for ((i, j), &a) in g.d_features.indexed_iter() {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp[[i, j]] += h;
            xm[[i, j]] -= h;
            check(a, loss_of(&w, lc, &xp, &y), loss_of(&w, lc, &xm, &y));
        }
    }
}

#[test]
fn argmax_matches_brute_scan() {
    let mut rng = seeded(3);
    for _ in 0..50 {
        let s = Array2::from_shape_simple_fn((5, 7), || rng.random_range(-1.0..1.0));
        let got = argmax_columns(s.view());
        for (j, col) in s.columns().into_iter().enumerate() {
            let mut best = 0;
            for i in 1..col.len() {
                if col[i] > col[best] {
                    best = i;
                }
            }
            assert_eq!(got[j], best);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig {
        cases: 100,
        failure_persistence: None,
        ..ProptestConfig::default()
    })]

    #[test]
    fn loss_is_nonnegative(seed in any::<u64>()) {
        let (w, x, labels, lc) = instance(seed);
        let y = LabelMatrix::one_hot(&labels, w.nrows()).unwrap();
        prop_assert!(loss_of(&w, lc, &x, &y) >= 0.0);
    }

    #[test]
    fn predictions_ignore_duplicate_columns(seed in any::<u64>()) {
        let (w, x, _, lc) = instance(seed);
        let p = ClassifierParams::new(w, lc).unwrap();
        let base = predict_labels(&p, x.view()).unwrap();
        let doubled = concatenate(Axis(1), &[x.view(), x.view()]).unwrap();
        let both = predict_labels(&p, doubled.view()).unwrap();
        prop_assert_eq!(&both[..base.len()], &base[..]);
        prop_assert_eq!(&both[base.len()..], &base[..]);
        prop_assert_eq!(linear_scores(&p, x.view()).unwrap().ncols(), base.len());
    }
}
