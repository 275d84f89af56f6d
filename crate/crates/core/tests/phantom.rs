use elasto_core::phantom::{
    add_noise, deform_and_render, generate_scene, ground_truth, render_rf, DeformationModel, Inclusion, RenderConfig,
    SceneConfig,
};
use elasto_core::strain::{least_squares_strain, StrainParams};

fn inclusion(k: f64) -> Inclusion {
    Inclusion {
        depth_mm: 10.0,
        lateral_mm: 0.0,
        radius_mm: 3.0,
        stiffness_ratio: k,
    }
}

#[test]
fn truth_strain_matches_applied_strain() {
    let cfg = RenderConfig::default();
    for eps in [0.01, 0.03, 0.05] {
        let truth = ground_truth(&DeformationModel::new(eps, None).unwrap(), &cfg);
        let strain = least_squares_strain(&truth, &StrainParams::default()).unwrap();
        for v in strain.values().iter() {
            assert!((v - eps).abs() <= 0.02 * eps, "ε = {eps}: strain {v}");
        }
    }
}

#[test]
fn truth_is_continuous_around_the_inclusion() {
    let cfg = RenderConfig::default();
    for k in [0.25, 0.5, 2.0] {
        let truth = ground_truth(&DeformationModel::new(0.05, Some(inclusion(k))).unwrap(), &cfg);
        let a = truth.axial();
        let (m, n) = a.dim();
        let mut jumps = Vec::with_capacity((m - 1) * n);
        for j in 0..n {
            for i in 1..m {
                jumps.push((a[[i, j]] - a[[i - 1, j]]).abs());
            }
        }
        let mean = jumps.iter().sum::<f64>() / jumps.len() as f64;
        let max = jumps.iter().cloned().fold(0.0, f64::max);
        assert!(max < 10.0 * mean, "k = {k}: max jump {max}, mean {mean}");
    }
}

#[test]
fn soft_inclusion_strains_more() {
    let cfg = RenderConfig::default();
    let model = DeformationModel::new(0.02, Some(inclusion(0.5))).unwrap();
    assert!((model.local_strain_at(10.0, 0.0) - 0.04).abs() < 1e-12);
    assert!((model.local_strain_at(10.0, 12.0) - 0.02).abs() < 0.002);
    let truth = ground_truth(&model, &cfg);
    let strain = least_squares_strain(&truth, &StrainParams::default()).unwrap();
    let (i, j) = ((10.0 / cfg.acquisition().axial_spacing).round() as usize, cfg.lines / 2);
    assert!(strain.values()[[i, j]] > 1.8 * strain.values()[[i, j + 50]]);
}

#[test]
fn rendering_is_independent_of_worker_count() {
    let cfg = RenderConfig {
        samples: 256,
        lines: 32,
        ..RenderConfig::default()
    };
    let scene_cfg = SceneConfig {
        depth_mm: 6.0,
        width_mm: 8.0,
        inclusion: Some(Inclusion {
            depth_mm: 3.0,
            radius_mm: 1.0,
            ..inclusion(0.5)
        }),
        ..SceneConfig::default()
    };
    let model = DeformationModel::new(0.02, scene_cfg.inclusion).unwrap();
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            let scene = generate_scene(&scene_cfg, 42).unwrap();
            let pre = add_noise(&render_rf(&scene, &cfg).unwrap(), 12.7, 1).unwrap();
            let (post, truth) = deform_and_render(&scene, &model, &cfg).unwrap();
            (pre, add_noise(&post, 12.7, 2).unwrap(), truth)
        })
    };
    assert_eq!(run(1), run(4));
}
