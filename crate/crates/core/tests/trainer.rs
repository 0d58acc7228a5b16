mod common;

use common::{toy_images, toy_model};
use ddl::classifier::ClassifierParams;
use ddl::datasets::{synthetic_image_classes, SyntheticImageSpec};
use ddl::error::{CheckpointError, DdlError};
use ddl::network::{layer, Dictionary, InputSpec, LayerSpec, ModelState};
use ddl::patch_ops::WindowSpec;
use ddl::rng::RngState;
use ddl::sparse_coding::ElasticNetParams;
use ddl::trainer::*;
use ndarray::{array, Array4};
use rand::Rng;

fn assert_same_state(a: &TrainState, b: &TrainState) {
    assert_eq!(a.model, b.model);
    assert_eq!(a.model.generation(), b.model.generation());
    assert_eq!(a.epoch, b.epoch);
    assert_eq!(a.step, b.step);
    assert_eq!(RngState::capture(&a.rng), RngState::capture(&b.rng));
}

#[test]
fn zero_step_size_leaves_model_unchanged() {
    let mut state = TrainState::new(toy_model(1, false), 1);
    let before = state.model.clone();
    let (imgs, labels) = toy_images(1, 5);
    let rep = train_step(&mut state, imgs.view(), &labels, 0.0).unwrap();
    assert!(rep.loss > 0.0);
    assert_eq!(state.model.layers()[0].dictionary, before.layers()[0].dictionary);
    assert_eq!(state.model.classifier(), before.classifier());
}

/// One 2-channel pixel, one atom, two classes: every quantity of the step has
/// a closed form.
#[test]
fn single_cell_step_matches_hand_rolled_update() {
    let enet = ElasticNetParams::new(0.1, 0.1).unwrap().with_tol(1e-14).with_max_iters(10_000);
    let input = InputSpec {
        channels: 2,
        height: 1,
        width: 1,
        window: WindowSpec::IDENTITY,
    };
    let spec = LayerSpec {
        num_atoms: 1,
        window: WindowSpec::IDENTITY,
        enet,
        batch_norm: false,
    };
    let d0 = array![[0.6], [0.8]];
    let w0 = array![[0.5], [-0.3]];
    let lc = 0.01;
    let model = ModelState::new(
        input,
        vec![layer(spec, Dictionary::new(d0.clone()).unwrap())],
        ClassifierParams::new(w0.clone(), lc).unwrap(),
    )
    .unwrap();
    let x: [f64; 2] = [1.0, 0.5];
    let img = Array4::from_shape_vec((1, 2, 1, 1), x.to_vec()).unwrap();
    let eta = 0.2;

    // code: a = (dᵀx − λ)/(1 + λ′)
    let a = (0.6 * x[0] + 0.8 * x[1] - 0.1) / 1.1;
    let z = [0.5 * a, -0.3 * a];
    let phi = [z[0].max(0.0), z[1].max(0.0)];
    let y: [f64; 2] = [1.0, 0.0];
    let loss = (y[0] - phi[0]).powi(2) + (y[1] - phi[1]).powi(2) + lc * (0.25 + 0.09);
    let e = [
        (phi[0] - y[0]) * f64::from(z[0] > 0.0),
        (phi[1] - y[1]) * f64::from(z[1] > 0.0),
    ];
    let dw = [2.0 * e[0] * a + 2.0 * lc * 0.5, 2.0 * e[1] * a + 2.0 * lc * -0.3];
    let grad_a = 2.0 * (0.5 * e[0] - 0.3 * e[1]);
    let beta = grad_a / 1.1;
    // dD = (x − Da)βᵀ − Daβᵀ
    let dd = [
        (x[0] - 0.6 * a) * beta - 0.6 * a * beta,
        (x[1] - 0.8 * a) * beta - 0.8 * a * beta,
    ];
    let raw = [0.6 - eta * dd[0], 0.8 - eta * dd[1]];
    let norm = (raw[0] * raw[0] + raw[1] * raw[1]).sqrt();

    let mut state = TrainState::new(model, 0);
    let rep = train_step(&mut state, img.view(), &[0], eta).unwrap();
    assert!((rep.loss - loss).abs() < 1e-12, "{} vs {}", rep.loss, loss);
    let w = &state.model.classifier().weights;
    assert!((w[[0, 0]] - (0.5 - eta * dw[0])).abs() < 1e-12);
    assert!((w[[1, 0]] - (-0.3 - eta * dw[1])).abs() < 1e-12);
    let d = state.model.layers()[0].dictionary.atoms();
    assert!((d[[0, 0]] - raw[0] / norm).abs() < 1e-12);
    assert!((d[[1, 0]] - raw[1] / norm).abs() < 1e-12);
}

#[test]
fn repeated_batch_loss_does_not_increase() {
    let mut ok = 0;
    for seed in 0..100 {
        let mut state = TrainState::new(toy_model(seed, false), seed);
        let (imgs, labels) = toy_images(seed, 6);
        let first = train_step(&mut state, imgs.view(), &labels, 1e-3).unwrap().loss;
        let second = train_step(&mut state, imgs.view(), &labels, 1e-3).unwrap().loss;
        ok += usize::from(second <= first);
    }
    assert!(ok >= 95, "{ok}/100 trials descended");
}

#[test]
fn zero_epochs_is_a_no_op() {
    let data = synthetic_image_classes(&SyntheticImageSpec { n: 20, size: 8, ..Default::default() }).unwrap();
    let sk = ModelSkeleton {
        input: InputSpec {
            channels: 1,
            height: 8,
            width: 8,
            window: WindowSpec::new(4, 4).unwrap(),
        },
        layers: vec![LayerSpec {
            num_atoms: 4,
            window: WindowSpec::new(2, 2).unwrap(),
            enet: ElasticNetParams::new(0.1, 0.1).unwrap(),
            batch_norm: false,
        }],
        num_classes: 4,
        lambda_c: 0.0,
    };
    let mut state = TrainState::new(init_model(&sk, 3).unwrap(), 3);
    let before = state.model.clone();
    let log = run_training(&mut state, &data, None, &TrainConfig::new(3, 0), &mut |_| Ok(())).unwrap();
    assert!(log.is_empty());
    assert_eq!(state.model, before);
    assert_eq!(metrics_csv(&log), format!("{METRICS_HEADER}\n"));
}

#[test]
fn training_is_deterministic_and_decays_step_size() {
    let data = synthetic_image_classes(&SyntheticImageSpec { n: 40, size: 8, ..Default::default() }).unwrap();
    let sk = ModelSkeleton {
        input: InputSpec {
            channels: 1,
            height: 8,
            width: 8,
            window: WindowSpec::new(4, 4).unwrap(),
        },
        layers: vec![LayerSpec {
            num_atoms: 5,
            window: WindowSpec::new(2, 2).unwrap(),
            enet: ElasticNetParams::new(0.1, 0.1).unwrap(),
            batch_norm: true,
        }],
        num_classes: 4,
        lambda_c: 1e-3,
    };
    let run = || {
        let mut s = TrainState::new(init_model(&sk, 4).unwrap(), 4);
        let mut cfg = TrainConfig::new(4, 3);
        cfg.batch_size = 8;
        let mut seen = Vec::new();
        run_training(&mut s, &data, Some(&data), &cfg, &mut |m| {
            seen.push(m.epoch);
            Ok(())
        })
        .unwrap();
        (s, seen)
    };
    let (a, seen) = run();
    let (b, _) = run();
    assert_same_state(&a, &b);
    assert_eq!(seen, vec![1, 2, 3]);
    assert_eq!(a.step, 15);
    let cfg = TrainConfig::new(0, 1);
    assert!((cfg.eta_at(2) - DEFAULT_ETA * DEFAULT_LR_DECAY * DEFAULT_LR_DECAY).abs() < 1e-15);
}

#[test]
fn checkpoint_round_trip_fresh_and_mid_training() {
    let fresh = TrainState::new(toy_model(7, true), 7);
    assert_same_state(&read_checkpoint(&write_checkpoint(&fresh)).unwrap(), &fresh);

    let mut state = TrainState::new(toy_model(8, true), 8);
    let (imgs, labels) = toy_images(8, 6);
    for _ in 0..3 {
        train_step(&mut state, imgs.view(), &labels, 0.1).unwrap();
    }
    state.rng.random::<u64>();
    let bytes = write_checkpoint(&state);
    let mut back = read_checkpoint(&bytes).unwrap();
    assert_same_state(&back, &state);
    assert_eq!(write_checkpoint(&back), bytes);
    // resumed training follows the same path
    let mut orig = state.clone();
    train_step(&mut orig, imgs.view(), &labels, 0.1).unwrap();
    train_step(&mut back, imgs.view(), &labels, 0.1).unwrap();
    assert_same_state(&back, &orig);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.ddl");
    save_checkpoint(&path, &state).unwrap();
    assert_same_state(&load_checkpoint(&path).unwrap(), &state);
}

fn checkpoint_err(bytes: &[u8]) -> CheckpointError {
    match read_checkpoint(bytes) {
        Err(DdlError::Checkpoint(e)) => e,
        other => panic!("expected a checkpoint error, got {:?}", other.map(|_| ())),
    }
}

#[test]
fn checkpoint_corruption_is_detected() {
    let bytes = write_checkpoint(&TrainState::new(toy_model(9, false), 9));
    for pos in [20, bytes.len() / 2, bytes.len() - 5] {
        let mut b = bytes.clone();
        b[pos] ^= 0x01;
        assert!(matches!(checkpoint_err(&b), CheckpointError::Checksum { .. }), "byte {pos}");
    }
    let mut b = bytes.clone();
    b[0] = b'X';
    assert!(matches!(checkpoint_err(&b), CheckpointError::BadMagic));
    let mut b = bytes.clone();
    b[4] = 2;
    assert!(matches!(checkpoint_err(&b), CheckpointError::VersionMismatch { found: 2, expected: 1 }));
    assert!(matches!(checkpoint_err(&bytes[..bytes.len() - 1]), CheckpointError::Truncated { .. }));
    assert!(matches!(checkpoint_err(&bytes[..10]), CheckpointError::Truncated { .. }));
}

#[test]
fn grid_search_picks_a_candidate() {
    let data = synthetic_image_classes(&SyntheticImageSpec { n: 40, size: 8, classes: 2, ..Default::default() }).unwrap();
    let mut cfg = TrainConfig::new(1, 1);
    cfg.batch_size = 8;
    cfg.grid = HyperGrid {
        lambda: exponential_grid(0.05, 2.0, 2),
        lambda_prime: vec![0.1],
        lambda_c: vec![1e-3],
    };
    let build = |enet: ElasticNetParams, lambda_c: f64| {
        Ok(ModelSkeleton {
            input: InputSpec {
                channels: 1,
                height: 8,
                width: 8,
                window: WindowSpec::new(4, 4).unwrap(),
            },
            layers: vec![LayerSpec {
                num_atoms: 4,
                window: WindowSpec::new(2, 2).unwrap(),
                enet,
                batch_norm: false,
            }],
            num_classes: 2,
            lambda_c,
        })
    };
    let (points, best) = grid_search(build, &data, &cfg, DEFAULT_FOLDS).unwrap();
    assert_eq!(points.len(), 2);
    assert_eq!(points[1].lambda, 0.1);
    assert!(points.iter().all(|p| p.fold_accuracies.len() == DEFAULT_FOLDS));
    assert!(points.iter().all(|p| p.mean_accuracy <= points[best].mean_accuracy));
}
