mod common;

use common::{toy_images, toy_model};
use ddl::network::{channel_scales, forward, normalize_batch, NormMode, DEFAULT_BN_EPS};
use ddl::patch_ops::FeatureGrid;
use ddl::rng::seeded;
use ddl::sparse_coding::{kkt_check, SparseCode};
use ddl::trainer::{train_step, TrainState};
use ndarray::Array3;
use rand::Rng;

#[test]
fn cached_codes_are_nonnegative_and_kkt_feasible() {
    for seed in 0..10 {
        let model = toy_model(seed, seed % 2 == 0);
        let (imgs, _) = toy_images(seed, 6);
        let (_, cache) = forward(&model, imgs.view(), &NormMode::Batch).unwrap();
        for (r, lc) in cache.layers.iter().enumerate() {
            let layer = &model.layers()[r];
            let tol = 10.0 * layer.spec.enet.tol;
            for (x, a) in lc.input.columns().into_iter().zip(lc.codes.columns()) {
                assert!(a.iter().all(|&v| v >= 0.0));
                let code = SparseCode::from_coeffs(a.to_owned());
                assert!(
                    kkt_check(layer.dictionary.atoms(), x, &code, &layer.spec.enet, tol),
                    "seed {seed} layer {r}"
                );
            }
        }
    }
}

#[test]
fn forward_is_deterministic() {
    let model = toy_model(4, true);
    let (imgs, _) = toy_images(4, 8);
    let (a, _) = forward(&model, imgs.view(), &NormMode::Batch).unwrap();
    let (b, _) = forward(&model, imgs.view(), &NormMode::Batch).unwrap();
    assert_eq!(a, b);
}

#[test]
fn batch_normalization_gives_unit_rms() {
    let mut rng = seeded(8);
    let grids: Vec<FeatureGrid> = (0..5)
        .map(|_| FeatureGrid::new(Array3::from_shape_simple_fn((3, 2, 2), || rng.random_range(0.0..2.0))).unwrap())
        .collect();
    let (out, scales) = normalize_batch(&grids, 0.0).unwrap();
    for ch in 0..3 {
        let vals: Vec<f64> = out.iter().flat_map(|g| g.data().index_axis(ndarray::Axis(0), ch).to_owned()).collect();
        let rms = (vals.iter().map(|v| v * v).sum::<f64>() / vals.len() as f64).sqrt();
        assert!((rms - 1.0).abs() < 1e-12, "channel {ch}: {rms}");
    }
    let zero = ndarray::Array2::<f64>::zeros((2, 4));
    assert!(channel_scales(zero.view(), DEFAULT_BN_EPS).iter().all(|&s| s == DEFAULT_BN_EPS));
    assert_eq!(scales.len(), 3);
}

#[test]
fn dictionaries_stay_unit_norm_through_training() {
    let mut state = TrainState::new(toy_model(2, true), 2);
    let (imgs, labels) = toy_images(2, 12);
    for _ in 0..20 {
        train_step(&mut state, imgs.view(), &labels, 0.5).unwrap();
        for l in state.model.layers() {
            assert!(l.dictionary.unit_norm_error() <= 1e-10);
        }
    }
}

#[test]
fn running_mode_uses_stored_scales() {
    let mut state = TrainState::new(toy_model(6, true), 6);
    let (imgs, labels) = toy_images(6, 8);
    train_step(&mut state, imgs.view(), &labels, 0.1).unwrap();
    let model = &state.model;
    let stored = model.layers()[0].running_scale.clone().unwrap();
    let (_, cache) = forward(model, imgs.view(), &NormMode::Running).unwrap();
    assert_eq!(cache.layers[0].scale.as_ref().unwrap(), &stored);
}
