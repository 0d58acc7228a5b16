#![allow(dead_code)]

use ddl::classifier::ClassifierParams;
use ddl::network::{layer, Dictionary, InputSpec, LayerSpec, ModelState};
use ddl::patch_ops::WindowSpec;
use ddl::rng::seeded;
use ddl::sparse_coding::ElasticNetParams;
use ndarray::{Array2, Array4};
use rand::Rng;

/// Two-layer toy model on 1×4×4 images: 2×2 patches (m₁ = 4), k₁ = 3,
/// regrouped 2/2 into one 12-dim cell, k₂ = 2, three classes.
pub fn toy_model(seed: u64, batch_norm: bool) -> ModelState {
    let mut rng = seeded(seed);
    let enet = ElasticNetParams::new(0.05, 0.1).unwrap().with_tol(1e-12).with_max_iters(5000);
    let input = InputSpec {
        channels: 1,
        height: 4,
        width: 4,
        window: WindowSpec::new(2, 2).unwrap(),
    };
    let l1 = LayerSpec {
        num_atoms: 3,
        window: WindowSpec::new(2, 2).unwrap(),
        enet,
        batch_norm,
    };
    let l2 = LayerSpec {
        num_atoms: 2,
        window: WindowSpec::IDENTITY,
        enet,
        batch_norm: false,
    };
    let d1 = Dictionary::random(4, 3, &mut rng);
    let d2 = Dictionary::random(12, 2, &mut rng);
    let w = Array2::from_shape_simple_fn((3, 2), || rng.random_range(-1.0..1.0));
    ModelState::new(
        input,
        vec![layer(l1, d1), layer(l2, d2)],
        ClassifierParams::new(w, 0.01).unwrap(),
    )
    .unwrap()
}

pub fn toy_images(seed: u64, n: usize) -> (Array4<f64>, Vec<usize>) {
    let mut rng = seeded(seed ^ 0x5eed);
    let imgs = Array4::from_shape_simple_fn((n, 1, 4, 4), || rng.random_range(0.0..1.0));
    let labels = (0..n).map(|_| rng.random_range(0..3)).collect();
    (imgs, labels)
}
