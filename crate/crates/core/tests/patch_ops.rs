use ddl::patch_ops::{patchify, regroup, regroup_adjoint, FeatureGrid, GridGeometry, WindowSpec};
use ddl::rng::seeded;
use ndarray::Array3;
use proptest::prelude::*;
use rand::Rng;

fn random_grid(g: GridGeometry, seed: u64) -> FeatureGrid {
    let mut rng = seeded(seed);
    FeatureGrid::new(Array3::from_shape_simple_fn((g.channels, g.height, g.width), || {
        rng.random_range(-1.0..1.0)
    }))
    .unwrap()
}

fn geometry() -> impl Strategy<Value = (GridGeometry, WindowSpec)> {
    (1usize..4, 1usize..5).prop_flat_map(|(c, w)| {
        (1..=w, w..w + 7, w..w + 7).prop_map(move |(s, h, wd)| {
            (GridGeometry::new(c, h, wd).unwrap(), WindowSpec::new(w, s).unwrap())
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig {
        cases: 64,
        failure_persistence: None,
        ..ProptestConfig::default()
    })]

    #[test]
    fn adjoint_identity((g, spec) in geometry(), seed in any::<u64>()) {
        let u = random_grid(g, seed);
        let out = g.windowed(spec).unwrap();
        let v = random_grid(out, seed ^ 1);
        let lhs = regroup(&u, spec).unwrap().dot(&v);
        let rhs = u.dot(&regroup_adjoint(&v, g, spec).unwrap());
        prop_assert!((lhs - rhs).abs() <= 1e-10 * (1.0 + lhs.abs()), "{} vs {}", lhs, rhs);
    }

    #[test]
    fn patchify_is_regroup_of_pixel_grid((g, spec) in geometry(), seed in any::<u64>()) {
        let mut rng = seeded(seed);
        let img = Array3::from_shape_simple_fn((g.channels, g.height, g.width), || rng.random_range(0.0..1.0));
        let direct = patchify(img.view(), spec).unwrap();
        let pixels = patchify(img.view(), WindowSpec::IDENTITY).unwrap();
        prop_assert_eq!(direct, regroup(&pixels, spec).unwrap());
    }

    #[test]
    fn non_overlapping_round_trip(c in 1usize..4, w in 1usize..4, gh in 1usize..4, gw in 1usize..4, seed in any::<u64>()) {
        let g = GridGeometry::new(c, w * gh, w * gw).unwrap();
        let spec = WindowSpec::new(w, w).unwrap();
        let u = random_grid(g, seed);
        let back = regroup_adjoint(&regroup(&u, spec).unwrap(), g, spec).unwrap();
        prop_assert_eq!(back, u);
    }
}
