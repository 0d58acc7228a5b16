use std::path::PathBuf;

use ddl::datasets::*;
use ddl::rng::seeded;
use ddl::sparse_coding::{active_set, fista_encode, ElasticNetParams};
use ndarray::Array4;
use rand::Rng;

#[test]
fn noiseless_supports_are_recovered() {
    let data = synthetic_dictionary_dataset(50, 20, 200, 3, 0.0, 11).unwrap();
    // the ridge term must stay well below λ or its shrinkage bias leaks into
    // off-support correlations
    let p = ElasticNetParams::new(1e-2, 1e-4).unwrap().with_tol(1e-12).with_max_iters(20_000);
    let mut hits = 0;
    for j in 0..200 {
        let code = fista_encode(data.dictionary.view(), data.signal(j), &p).unwrap();
        hits += usize::from(active_set(code.coeffs.view(), 1e-6) == data.support(j));
    }
    println!("recovered {hits}/200 supports");
    assert!(hits >= 180, "{hits}/200");
}

/// Pixels that survive byte quantization exactly.
fn byte_images(n: usize, c: usize, h: usize, w: usize, seed: u64) -> Array4<f64> {
    let mut rng = seeded(seed);
    Array4::from_shape_simple_fn((n, c, h, w), || f64::from(rng.random::<u8>()) / 255.0)
}

#[test]
fn idx_round_trip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let images = byte_images(7, 1, 5, 4, 1);
    let labels = vec![0, 9, 3, 3, 1, 7, 2];
    let (ip, lp) = (dir.path().join("i"), dir.path().join("l"));
    write_idx_images(&ip, &images).unwrap();
    write_idx_labels(&lp, &labels).unwrap();
    let set = load_mnist(&ip, &lp).unwrap();
    assert_eq!(set.images, images);
    assert_eq!(set.labels, labels);
    assert_eq!(set.class_histogram(), vec![1, 1, 1, 2, 0, 0, 0, 1, 0, 1]);
}

#[test]
fn cifar_round_trip_is_exact_across_files() {
    let dir = tempfile::tempdir().unwrap();
    let a = LabeledImageSet::new(byte_images(3, 3, 32, 32, 2), vec![4, 0, 9], 10).unwrap();
    let b = LabeledImageSet::new(byte_images(2, 3, 32, 32, 3), vec![1, 1], 10).unwrap();
    let paths: Vec<PathBuf> = ["a.bin", "b.bin"].iter().map(|f| dir.path().join(f)).collect();
    write_cifar10(&paths[0], &a).unwrap();
    write_cifar10(&paths[1], &b).unwrap();
    let both = load_cifar10(&paths).unwrap();
    assert_eq!(both.len(), 5);
    assert_eq!(both.head(3).unwrap(), a);
    assert_eq!(both.subset(&[3, 4]).unwrap(), b);
    assert_eq!(std::fs::metadata(&paths[0]).unwrap().len() as usize, 3 * CIFAR_RECORD);
}

#[test]
fn synthetic_images_lie_in_unit_interval_and_are_seeded() {
    let spec = SyntheticImageSpec { n: 50, ..Default::default() };
    let a = synthetic_image_classes(&spec).unwrap();
    assert!(a.images.iter().all(|v| (0.0..=1.0).contains(v)));
    assert_eq!(a, synthetic_image_classes(&spec).unwrap());
    let other = synthetic_image_classes(&SyntheticImageSpec { seed: spec.seed + 1, ..spec.clone() }).unwrap();
    assert_ne!(a.images, other.images);
}

#[test]
fn batches_cover_every_index_once() {
    let batches = batch_iter(10, 3, 4, 0).unwrap();
    assert_eq!(batches.iter().map(Vec::len).collect::<Vec<_>>(), vec![3, 3, 3, 1]);
    let mut all: Vec<usize> = batches.concat();
    all.sort_unstable();
    assert_eq!(all, (0..10).collect::<Vec<_>>());
    assert_ne!(batches, batch_iter(10, 3, 4, 1).unwrap());
    assert_eq!(batches, batch_iter(10, 3, 4, 0).unwrap());
}

fn mnist_dir() -> Option<PathBuf> {
    let local = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist");
    resolve_data_dir(None, "mnist")
        .filter(|p| p.join("t10k-images-idx3-ubyte").exists())
        .or_else(|| local.join("t10k-images-idx3-ubyte").exists().then_some(local))
}

#[test]
fn mnist_has_official_counts() {
    let Some(dir) = mnist_dir() else {
        println!("skipped: MNIST files not found");
        return;
    };
    let train = load_mnist_dir(&dir, Split::Train).unwrap();
    let test = load_mnist_dir(&dir, Split::Test).unwrap();
    assert_eq!(train.images.dim(), (60_000, 1, 28, 28));
    assert_eq!(test.images.dim(), (10_000, 1, 28, 28));
    assert_eq!(
        train.class_histogram(),
        vec![5923, 6742, 5958, 6131, 5842, 5421, 5918, 6265, 5851, 5949]
    );
    assert_eq!(
        test.class_histogram(),
        vec![980, 1135, 1032, 1010, 982, 892, 958, 1028, 974, 1009]
    );
    assert!(test.images.iter().all(|v| (0.0..=1.0).contains(v)));
}
