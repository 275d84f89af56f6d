use elasto_core::coarse::{estimate_coarse, import_external_flow, CoarseParams};
use elasto_core::phantom::{
    add_noise, deform_and_render, generate_scene, render_rf, DeformationModel, RenderConfig, RigidShift, SceneConfig,
};
use elasto_core::rf::io::{save_field, Format};
use elasto_core::rf::{DisplacementField, RfFrame};
use ndarray::{s, Array2};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_render() -> RenderConfig {
    RenderConfig {
        samples: 512,
        lines: 64,
        ..RenderConfig::default()
    }
}

fn small_scene(seed: u64) -> elasto_core::phantom::PhantomScene {
    let cfg = SceneConfig {
        depth_mm: 12.0,
        width_mm: 16.0,
        ..SceneConfig::default()
    };
    generate_scene(&cfg, seed).unwrap()
}

/// `out(i, j) = img(i - da, j - dl)`, zero where that falls outside.
fn shift(img: &Array2<f64>, da: isize, dl: isize) -> Array2<f64> {
    let (m, n) = img.dim();
    Array2::from_shape_fn((m, n), |(i, j)| {
        let (r, c) = (i as isize - da, j as isize - dl);
        if r < 0 || c < 0 || r >= m as isize || c >= n as isize {
            0.0
        } else {
            img[[r as usize, c as usize]]
        }
    })
}

fn interior_max_err(field: &DisplacementField, axial: f64, lateral: f64) -> (f64, f64) {
    let (m, n) = field.dim();
    let a = field.axial().slice(s![64..m - 64, 8..n - 8]);
    let l = field.lateral().slice(s![64..m - 64, 8..n - 8]);
    (
        a.iter().map(|v| (v - axial).abs()).fold(0.0, f64::max),
        l.iter().map(|v| (v - lateral).abs()).fold(0.0, f64::max),
    )
}

#[test]
fn integer_shift_recovered() {
    let cfg = small_render();
    let pre = render_rf(&small_scene(3), &cfg).unwrap();
    for (da, dl) in [(3, 1), (-5, 2), (12, -3), (0, 4), (0, -4), (30, -4)] {
        let post = RfFrame::new(shift(pre.samples(), da, dl), *pre.acquisition()).unwrap();
        let field = estimate_coarse(&pre, &post, &CoarseParams::default()).unwrap();
        let (ea, el) = interior_max_err(&field, da as f64, dl as f64);
        assert!(ea < 0.05 && el < 0.05, "shift ({da},{dl}): axial err {ea}, lateral err {el}");
    }
}

#[test]
fn identical_frames_give_zero_field() {
    let pre = render_rf(&small_scene(4), &small_render()).unwrap();
    let field = estimate_coarse(&pre, &pre, &CoarseParams::default()).unwrap();
    let (a, l) = field.max_abs();
    assert!(a < 1e-6 && l < 1e-6, "{a} {l}");
}

#[test]
fn subsample_shift_within_tolerance() {
    let cfg = small_render();
    let scene = small_scene(5);
    let pre = render_rf(&scene, &cfg).unwrap();
    // Moving the scatterers re-renders a band-limited shifted frame.
    let dz = cfg.acquisition().axial_spacing;
    let model = RigidShift {
        axial_mm: 2.5 * dz,
        lateral_mm: 0.0,
    };
    let (post, truth) = deform_and_render(&scene, &model, &cfg).unwrap();
    assert!((truth.axial()[[100, 10]] - 2.5).abs() < 1e-9);
    let field = estimate_coarse(&pre, &post, &CoarseParams::default()).unwrap();
    let (m, n) = field.dim();
    for v in field.axial().slice(s![64..m - 64, 8..n - 8]).iter() {
        assert!((2.3..=2.7).contains(v), "estimate {v}");
    }
}

#[test]
fn swapping_frames_negates_the_estimate() {
    let cfg = small_render();
    let scene = small_scene(6);
    let pre = render_rf(&scene, &cfg).unwrap();
    let dz = cfg.acquisition().axial_spacing;
    let model = RigidShift {
        axial_mm: 4.3 * dz,
        lateral_mm: -cfg.lateral_spacing_mm,
    };
    let (post, _) = deform_and_render(&scene, &model, &cfg).unwrap();
    let p = CoarseParams::default();
    let fwd = estimate_coarse(&pre, &post, &p).unwrap();
    let back = estimate_coarse(&post, &pre, &p).unwrap();
    let (m, n) = fwd.dim();
    let sum_a = fwd.axial() + back.axial();
    let sum_l = fwd.lateral() + back.lateral();
    // Interior: points whose interpolation only uses blocks clear of the edges.
    let worst = |x: &Array2<f64>| x.slice(s![96..m - 96, 12..n - 12]).iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    assert!(worst(&sum_a) < 0.1, "axial asymmetry {}", worst(&sum_a));
    assert!(worst(&sum_l) < 0.1, "lateral asymmetry {}", worst(&sum_l));
}

#[test]
fn noisy_phantom_median_error_below_one_sample() {
    let cfg = RenderConfig::default();
    let scene = generate_scene(&SceneConfig::default(), 21).unwrap();
    let pre = add_noise(&render_rf(&scene, &cfg).unwrap(), 12.7, 31).unwrap();
    for eps in [0.01, 0.02] {
        let model = DeformationModel::new(eps, None).unwrap();
        let (post, truth) = deform_and_render(&scene, &model, &cfg).unwrap();
        let post = add_noise(&post, 12.7, 32).unwrap();
        let field = estimate_coarse(&pre, &post, &CoarseParams::default()).unwrap();
        let mut err: Vec<f64> = field
            .axial()
            .iter()
            .zip(truth.axial().iter())
            .map(|(a, b)| (a - b).abs())
            .collect();
        err.sort_by(f64::total_cmp);
        let median = err[err.len() / 2];
        assert!(median < 1.0, "ε = {eps}: median error {median}");
    }
}

#[test]
fn dimension_and_size_errors() {
    let acq = RenderConfig::default().acquisition();
    let a = RfFrame::new(Array2::zeros((200, 40)), acq).unwrap();
    let b = RfFrame::new(Array2::zeros((201, 40)), acq).unwrap();
    assert!(estimate_coarse(&a, &b, &CoarseParams::default()).is_err());
    let tiny = RfFrame::new(Array2::zeros((64, 12)), acq).unwrap();
    assert!(estimate_coarse(&tiny, &tiny, &CoarseParams::default()).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn pyramid_estimates_stay_within_reach(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let acq = RenderConfig::default().acquisition();
        let mut noise = || Array2::from_shape_fn((160, 24), |_| rng.random_range(-1.0..1.0));
        let pre = RfFrame::new(noise(), acq).unwrap();
        let post = RfFrame::new(noise(), acq).unwrap();
        let p = CoarseParams {
            levels: 2,
            block: (16, 6),
            search: (6, 2),
            max_stretch: 0.0,
            min_correlation: 0.0,
            ..CoarseParams::default()
        };
        let field = estimate_coarse(&pre, &post, &p).unwrap();
        let (a, l) = field.max_abs();
        prop_assert!(a <= p.axial_reach() + 1e-9, "axial {} > {}", a, p.axial_reach());
        prop_assert!(l <= p.lateral_reach() + 1e-9, "lateral {} > {}", l, p.lateral_reach());
    }
}

#[test]
fn import_at_rf_dims_is_unchanged() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("flow.eldf");
    let field = DisplacementField::new(
        Array2::from_shape_fn((6, 4), |(i, j)| i as f64 * 0.5 - j as f64),
        Array2::from_shape_fn((6, 4), |(i, j)| 0.25 * (i + j) as f64),
    )
    .unwrap();
    save_field(&field, &path, Format::Binary).unwrap();
    let back = import_external_flow(&path, (6, 4)).unwrap();
    assert_eq!(back, field);
}

#[test]
fn import_rescales_half_resolution_flow() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("half.eldf");
    save_field(&DisplacementField::constant(32, 16, 2.0, 0.0), &path, Format::Binary).unwrap();
    let full = import_external_flow(&path, (64, 32)).unwrap();
    assert!(full.axial().iter().all(|v| (v - 4.0).abs() < 1e-12));
    assert!(full.lateral().iter().all(|v| v.abs() < 1e-12));
}

#[test]
fn import_round_trip_of_random_field() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let field = DisplacementField::new(
        Array2::from_shape_fn((40, 12), |_| rng.random_range(-8.0..8.0)),
        Array2::from_shape_fn((40, 12), |_| rng.random_range(-2.0..2.0)),
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("rand.eldf");
    save_field(&field, &path, Format::Binary).unwrap();
    let back = import_external_flow(&path, (40, 12)).unwrap();
    let diff = (back.axial() - field.axial())
        .iter()
        .chain((back.lateral() - field.lateral()).iter())
        .fold(0.0f64, |acc, v| acc.max(v.abs()));
    assert!(diff < 1e-6, "{diff}");
}

#[test]
fn import_propagates_parse_errors() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.eldf");
    std::fs::write(&path, b"ELDFgarbage").unwrap();
    assert!(import_external_flow(&path, (4, 4)).is_err());
}

