use ndarray::{Array2, Array3};
use proptest::prelude::*;

use reverb::config::RunConfig;
use reverb::curves::curve_non_altered;
use reverb::linear::linear_fit;
use reverb::metrics::{min_ade_fde, stat_ade_fde};
use reverb::model::{ModelConfig, RevModel};
use reverb::reverb::{reverberation_transform, sequential_similarity, transform_features, ReverbKernelPair};
use reverb::social::{partition_of, social_representation};
use reverb::transforms::{forward_array, inverse_array, TransformKind};

fn matrix(rows: usize, cols: usize, lim: f64) -> impl Strategy<Value = Array2<f64>> {
    prop::collection::vec(-lim..lim, rows * cols).prop_map(move |v| Array2::from_shape_vec((rows, cols), v).unwrap())
}

fn kind() -> impl Strategy<Value = TransformKind> {
    prop::sample::select(TransformKind::ALL.to_vec())
}

fn sequence() -> impl Strategy<Value = (Array2<f64>, TransformKind)> {
    (1usize..=10, 1usize..=3, kind()).prop_flat_map(|(h, m, k)| (matrix(2 * h, m, 50.0), Just(k)))
}

proptest! {
    #[test]
    fn round_trip((x, k) in sequence()) {
        let back = inverse_array(forward_array(x.view(), k).unwrap().view(), k).unwrap();
        for (a, b) in x.iter().zip(&back) {
            prop_assert!((a - b).abs() <= 1e-8 * (1.0 + a.abs()));
        }
    }

    #[test]
    fn transforms_preserve_energy((x, k) in sequence()) {
        let spec = forward_array(x.view(), k).unwrap();
        let e0: f64 = x.iter().map(|v| v * v).sum();
        let e1: f64 = spec.iter().map(|v| v * v).sum();
        prop_assert!((e0 - e1).abs() <= 1e-9 * (1.0 + e0));
    }

    #[test]
    fn factorized_transform_matches_slices(
        (f, r, g) in (1usize..=6, 1usize..=5, 1usize..=4, 1usize..=3)
            .prop_flat_map(|(t, tf, kg, d)| (matrix(t, d, 2.0), matrix(t, tf, 1.0), matrix(t, kg, 1.0)))
    ) {
        let k = ReverbKernelPair::new(r, g).unwrap();
        let a = reverberation_transform(&sequential_similarity(f.view()).unwrap(), &k).unwrap().values;
        let b = transform_features(f.view(), &k).unwrap().values;
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() <= 1e-12 * (1.0 + x.abs()));
        }
    }

    #[test]
    fn altered_curves_are_distributions(
        (r, g) in (1usize..=6, 1usize..=6, 1usize..=4).prop_flat_map(|(t, tf, kg)| (matrix(t, tf, 1.0), matrix(t, kg, 1.0)))
    ) {
        for k in 0..g.ncols() {
            let c = curve_non_altered(r.view(), g.view(), k).unwrap();
            for (t, col) in c.values.columns().into_iter().enumerate() {
                prop_assert!(col.iter().all(|&v| (0.0..=1.0).contains(&v)));
                prop_assert!((col.sum() - 1.0).abs() < 1e-9, "step {t} degenerate={}", c.degenerate[t]);
            }
        }
    }

    #[test]
    fn min_is_below_mean(k in 1usize..8, tf in 1usize..6, v in prop::collection::vec(-5.0f64..5.0, 8 * 6 * 2 + 12)) {
        let preds = Array3::from_shape_fn((k, tf, 2), |(a, b, c)| v[a * 12 + b * 2 + c]);
        let gt = Array2::from_shape_fn((tf, 2), |(b, c)| v[96 + b * 2 + c]);
        let (ade, fde) = min_ade_fde(&preds, gt.view()).unwrap();
        let st = stat_ade_fde(&preds, gt.view()).unwrap();
        prop_assert!(ade <= st.mean_ade + 1e-12 && fde <= st.mean_fde + 1e-12);
        prop_assert!(st.std_ade >= 0.0);
    }

    #[test]
    fn linear_fit_is_exact_on_lines(x0 in -10.0f64..10.0, y0 in -10.0f64..10.0, vx in -2.0f64..2.0, vy in -2.0f64..2.0, th in 2usize..10) {
        let x = Array2::from_shape_fn((th, 2), |(t, j)| if j == 0 { x0 + vx * t as f64 } else { y0 + vy * t as f64 });
        let fit = linear_fit(x.view(), 5).unwrap();
        for (t, row) in fit.predicted.rows().into_iter().enumerate() {
            let tt = (th + t) as f64;
            prop_assert!((row[0] - (x0 + vx * tt)).abs() < 1e-9);
            prop_assert!((row[1] - (y0 + vy * tt)).abs() < 1e-9);
        }
    }

    #[test]
    fn partition_index_in_range(dx in -5.0f64..5.0, dy in -5.0f64..5.0, n in 1usize..16) {
        let p = partition_of([0.0, 0.0], [dx, dy], n);
        prop_assert!(p.index < n);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn social_representation_ignores_neighbor_order(
        nbrs in prop::collection::vec(matrix(4, 2, 6.0), 0..5),
        seed in any::<prop::sample::Index>(),
    ) {
        let cfg = ModelConfig { t_h: 4, t_f: 6, d: 8, k_g: 4, n_theta: 4, layers: 1, heads: 2, ..ModelConfig::default() };
        let model = RevModel::new(cfg, 1).unwrap();
        let ego = Array2::from_shape_fn((4, 2), |(t, j)| (t as f64 - 3.0) * if j == 0 { 0.5 } else { 0.1 });
        let a = social_representation(model.social_encoder(), &model.params, ego.view(), &nbrs, false).unwrap();
        let mut shuffled = nbrs.clone();
        if !shuffled.is_empty() {
            let n = shuffled.len();
            shuffled.rotate_left(seed.index(n));
            shuffled.reverse();
        }
        let b = social_representation(model.social_encoder(), &model.params, ego.view(), &shuffled, false).unwrap();
        prop_assert_eq!(a.values, b.values);
    }
}

#[test]
fn config_round_trips_through_toml() {
    let mut cfg = RunConfig { seed: 11, ..RunConfig::default() };
    cfg.model.d = 24;
    cfg.train.lr = 3e-4;
    let back = RunConfig::parse(&cfg.to_toml()).unwrap();
    assert_eq!(back.to_toml(), cfg.to_toml());
    assert_eq!(back.hash(), cfg.hash());
    let mut moved = cfg.clone();
    moved.out_dir = "elsewhere".into();
    moved.train.threads = 7;
    assert_eq!(moved.hash(), cfg.hash());
    moved.model.d = 16;
    assert_ne!(moved.hash(), cfg.hash());
}
