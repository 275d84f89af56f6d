use elasto_core::coarse::{estimate_coarse, CoarseParams};
use elasto_core::glue::{build_linear_system, cost_value, glue_refine, solve_refinement, GlueParams};
use elasto_core::phantom::{deform_and_render, generate_scene, render_rf, DeformationModel, RenderConfig, SceneConfig};
use elasto_core::rf::{Acquisition, DisplacementField, RfFrame};
use nalgebra::{DMatrix, DVector};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn frame(s: Array2<f64>) -> RfFrame {
    RfFrame::new(s, Acquisition::default()).unwrap()
}

/// Random frames and a field whose every sampling position lies strictly
/// inside a cell of `post`, away from nodes, so the cost is smooth there.
fn interior_instance(rng: &mut ChaCha8Rng, m: usize, n: usize) -> (RfFrame, RfFrame, DisplacementField) {
    let pre = frame(Array2::from_shape_fn((m, n), |_| rng.random_range(-1.0..1.0)));
    let post = frame(Array2::from_shape_fn((m, n), |_| rng.random_range(-1.0..1.0)));
    let mut offset = |k: usize, len: usize| (k.min(len - 2) as f64 + rng.random_range(0.15..0.85)) - k as f64;
    let mut a = Array2::zeros((m, n));
    let mut l = Array2::zeros((m, n));
    for i in 0..m {
        for j in 0..n {
            a[[i, j]] = offset(i, m);
            l[[i, j]] = offset(j, n);
        }
    }
    (pre, post, DisplacementField::new(a, l).unwrap())
}

fn random_weights(rng: &mut ChaCha8Rng) -> GlueParams {
    GlueParams {
        alpha_axial: rng.random_range(0.05..5.0),
        alpha_lateral: rng.random_range(0.05..5.0),
        beta_axial: rng.random_range(0.05..5.0),
        beta_lateral: rng.random_range(0.05..5.0),
        solver_tolerance: 1e-13,
        solver_max_iters: 10_000,
        ..GlueParams::default()
    }
}

#[test]
fn iterative_solve_matches_dense_cholesky() {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let (pre, post, field) = interior_instance(&mut rng, 6, 5);
        let p = random_weights(&mut rng);
        let sys = build_linear_system(&pre, &post, &field, &p).unwrap();
        assert_eq!(sys.max_asymmetry(), 0.0);
        let size = sys.size();
        let dense = sys.to_dense();
        let mat = DMatrix::from_fn(size, size, |r, c| dense[r][c]);
        let chol = mat.clone().cholesky().expect("matrix is positive definite");
        let direct = chol.solve(&DVector::from_column_slice(sys.rhs()));
        let iterative = solve_refinement(&sys, &p).unwrap().increments;
        let diff = direct.iter().zip(&iterative).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        worst = worst.max(diff / direct.norm());
    }
    assert!(worst < 1e-8, "relative difference {worst}");
}

#[test]
fn rhs_matches_finite_difference_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let h = 1e-6;
    for _ in 0..5 {
        let (pre, post, field) = interior_instance(&mut rng, 8, 6);
        let mut p = random_weights(&mut rng);
        p.solver_tolerance = 1e-6;
        let sys = build_linear_system(&pre, &post, &field, &p).unwrap();
        let (m, n) = field.dim();
        let cost = |f: &DisplacementField| cost_value(&pre, &post, f, &p).unwrap();
        for j in 0..n {
            for i in 0..m {
                for c in 0..2 {
                    let bump = |d: f64| {
                        let (mut a, mut l) = field.clone().into_parts();
                        if c == 0 {
                            a[[i, j]] += d;
                        } else {
                            l[[i, j]] += d;
                        }
                        cost(&DisplacementField::new(a, l).unwrap())
                    };
                    let grad = (bump(h) - bump(-h)) / (2.0 * h);
                    let b = sys.rhs()[2 * (j * m + i) + c];
                    let rel = (b + 0.5 * grad).abs() / b.abs().max(1e-3);
                    assert!(rel < 1e-4, "({i},{j}) component {c}: rhs {b}, -grad/2 {}", -0.5 * grad);
                }
            }
        }
    }
}

#[test]
fn refinement_recovers_subsample_detail() {
    let cfg = RenderConfig {
        samples: 512,
        lines: 48,
        ..RenderConfig::default()
    };
    let scene_cfg = SceneConfig {
        depth_mm: 11.0,
        width_mm: 12.0,
        ..SceneConfig::default()
    };
    let scene = generate_scene(&scene_cfg, 9).unwrap();
    let pre = render_rf(&scene, &cfg).unwrap();
    let (post, truth) = deform_and_render(&scene, &DeformationModel::new(0.01, None).unwrap(), &cfg).unwrap();
    // Weights assume unit peak amplitude.
    let gain = 1.0 / pre.samples().iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    let pre = frame(pre.samples() * gain);
    let post = frame(post.samples() * gain);
    // Rounding to whole samples and lines leaves only integer-level detail.
    let (a, l) = estimate_coarse(&pre, &post, &CoarseParams::default()).unwrap().into_parts();
    let coarse = DisplacementField::new(a.mapv(f64::round), l.mapv(f64::round)).unwrap();
    let refined = glue_refine(&pre, &post, &coarse, &GlueParams::default()).unwrap();
    let rmse = |f: &DisplacementField| {
        let d = f.axial() - truth.axial();
        (d.iter().map(|v| v * v).sum::<f64>() / d.len() as f64).sqrt()
    };
    let (before, after) = (rmse(&coarse), rmse(&refined.field));
    assert!(after < 0.5 * before, "rmse {before} -> {after}");
    for it in &refined.log {
        assert!(it.model_at_solution <= it.model_at_zero, "{it}");
        assert!(it.converged, "{it}");
    }
}
