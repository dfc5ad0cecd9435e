mod common;

use common::{random_model, small_suite};
use mvdg::analysis::{
    estimate_bound_terms, sharpness_of, sharpness_probe, surface_grid_losses, surface_loss_at, surface_plane_basis,
    theorem1_bound, BnPolicy, BoundInputs, BoundTermOptions, SharpnessConfig,
};
use mvdg::domains::{generate_synthetic_suite, rotated_suite_specs};
use mvdg::mvp::{predict_multiview_with, prediction_change_rate, TransformSpec};
use mvdg::nn::{ArchSpec, ModelState};
use mvdg::rng::RngStream;
use proptest::prelude::*;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn vec_strategy(d: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-5.0f64..5.0, d)
}

fn bound_inputs() -> impl Strategy<Value = BoundInputs> {
    (
        0.0f64..2.0,
        0.0f64..2.0,
        0.0f64..0.1,
        0.0f64..0.1,
        1u64..10_000,
        0.001f64..0.999,
        0.1f64..5.0,
    )
        .prop_map(|(r, d, b1, b2, n, delta, m)| BoundInputs {
            empirical_risk: r,
            sup_divergence: d,
            beta1: b1,
            beta2: b2,
            n_sequences: n,
            delta,
            loss_bound_m: m,
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn multiview_output_is_a_distribution(seed in 0u64..1000, m in 1usize..40, x in vec_strategy(2)) {
        let model = random_model(ArchSpec::new(2, vec![5], 3).with_batchnorm_everywhere(), seed);
        let p = predict_multiview_with(&model, &x, m, &TransformSpec::default(), &mut RngStream::new(seed, 1).rng()).unwrap();
        prop_assert!((p.sum() - 1.0).abs() <= 1e-12);
        prop_assert!(p.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn pcr_is_a_rate_and_zero_without_transform(seed in 0u64..200, trials in 1usize..5) {
        let model = random_model(ArchSpec::new(2, vec![4], 3), seed);
        let data = &small_suite(5, seed).datasets[1];
        let r = prediction_change_rate(&model, data, &TransformSpec::default(), trials, RngStream::new(seed, 2)).unwrap();
        prop_assert!((0.0..=1.0).contains(&r));
        let z = prediction_change_rate(&model, data, &TransformSpec::identity(), trials, RngStream::new(seed, 2)).unwrap();
        prop_assert_eq!(z, 0.0);
    }

    #[test]
    fn plane_basis_is_orthonormal_and_reconstructs(w1 in vec_strategy(50), w2 in vec_strategy(50), w3 in vec_strategy(50)) {
        let p = surface_plane_basis(&w1, &w2, &w3).unwrap();
        prop_assert!(dot(&p.basis_u, &p.basis_v).abs() <= 1e-10);
        prop_assert!((norm(&p.basis_u) - 1.0).abs() <= 1e-12);
        prop_assert!((norm(&p.basis_v) - 1.0).abs() <= 1e-12);
        let d3: Vec<f64> = w3.iter().zip(&w1).map(|(a, b)| a - b).collect();
        prop_assert!(dot(&p.basis_v, &d3) >= 0.0);
        for (w, [a, b]) in [(&w2, p.w2_coords), (&w3, p.w3_coords)] {
            for (x, y) in p.point(a, b).iter().zip(w.iter()) {
                prop_assert!((x - y).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn plane_basis_survives_recentred_scaling(
        w1 in vec_strategy(20), w2 in vec_strategy(20), w3 in vec_strategy(20), c in 0.01f64..100.0,
    ) {
        let scale = |w: &[f64]| -> Vec<f64> { w.iter().zip(&w1).map(|(x, o)| o + c * (x - o)).collect() };
        let p = surface_plane_basis(&w1, &w2, &w3).unwrap();
        let q = surface_plane_basis(&w1, &scale(&w2), &scale(&w3)).unwrap();
        for (a, b) in p.basis_u.iter().zip(&q.basis_u).chain(p.basis_v.iter().zip(&q.basis_v)) {
            prop_assert!((a - b).abs() <= 1e-9);
        }
        for (w, [a, b]) in [(scale(&w2), q.w2_coords), (scale(&w3), q.w3_coords)] {
            for (x, y) in q.point(a, b).iter().zip(&w) {
                prop_assert!((x - y).abs() <= 1e-9 * c.max(1.0));
            }
        }
    }

    #[test]
    fn bound_is_monotone_in_each_input(i in bound_inputs(), bump in 0.001f64..1.0) {
        let base = theorem1_bound(&i).unwrap();
        let ups = [
            BoundInputs { empirical_risk: i.empirical_risk + bump, ..i.clone() },
            BoundInputs { sup_divergence: i.sup_divergence + bump, ..i.clone() },
            BoundInputs { beta1: i.beta1 + bump, ..i.clone() },
            BoundInputs { beta2: i.beta2 + bump, ..i.clone() },
            BoundInputs { loss_bound_m: i.loss_bound_m + bump, ..i.clone() },
        ];
        for u in ups {
            prop_assert!(theorem1_bound(&u).unwrap() >= base);
        }
        // With beta1 = 0 the n dependence is the concentration term alone.
        let flat = BoundInputs { beta1: 0.0, ..i.clone() };
        let more = BoundInputs { n_sequences: i.n_sequences + 1, ..flat.clone() };
        prop_assert!(theorem1_bound(&more).unwrap() <= theorem1_bound(&flat).unwrap());
    }
}

#[test]
fn multiview_variance_shrinks_with_views() {
    let model = random_model(ArchSpec::new(2, vec![8], 3).with_batchnorm_everywhere(), 9);
    let data = &small_suite(10, 4).datasets[2];
    let spec = TransformSpec::default();
    let seeds = 40u64;
    let variance = |m: usize| -> f64 {
        let mut total = 0.0;
        for (i, row) in data.features.rows().into_iter().enumerate() {
            let x = row.to_vec();
            let ps: Vec<_> = (0..seeds)
                .map(|s| predict_multiview_with(&model, &x, m, &spec, &mut RngStream::new(s, i as u64).rng()).unwrap())
                .collect();
            let mean = ps.iter().fold(ndarray::Array1::<f64>::zeros(3), |a, p| a + p) / seeds as f64;
            total += ps.iter().map(|p| (p - &mean).mapv(|v| v * v).sum()).sum::<f64>() / seeds as f64;
        }
        total
    };
    let v: Vec<f64> = [1, 4, 16, 64].into_iter().map(variance).collect();
    for w in v.windows(2) {
        assert!(w[1] <= w[0], "variances {v:?}");
    }
}

#[test]
fn sharpness_vanishes_at_tiny_radius() {
    let model = random_model(ArchSpec::new(2, vec![6], 3).with_batchnorm_everywhere(), 2);
    let data = &small_suite(20, 1).datasets[0];
    let cfg = SharpnessConfig {
        radii_gamma: vec![1e-8],
        ..SharpnessConfig::default()
    };
    let rec = sharpness_probe(&model, data, &cfg).unwrap();
    assert!(rec.points[0].sharpness.abs() < 1e-6);
}

#[test]
fn quadratic_sharpness_matches_expectation() {
    let d = 12;
    let cfg = SharpnessConfig {
        radii_gamma: vec![0.01, 0.05, 0.1, 0.2],
        perturbations_per_radius: 200,
        seed: 3,
    };
    let (base, points) = sharpness_of(&vec![0.0; d], |t| Ok(t.iter().map(|v| v * v).sum()), &cfg).unwrap();
    assert_eq!(base, 0.0);
    for p in &points {
        let expected = d as f64 * p.gamma * p.gamma;
        assert!((p.sharpness - expected).abs() <= 3.0 * p.std_error, "{p:?}");
    }
    assert!(points.windows(2).all(|w| w[1].sharpness > w[0].sharpness));
}

fn anchors() -> (ArchSpec, [ModelState; 3]) {
    let arch = ArchSpec::new(2, vec![5], 3).with_batchnorm_everywhere();
    let suite = small_suite(20, 8);
    let ms = [1, 2, 3].map(|s| mvdg::meta::reestimate_bn(&random_model(arch.clone(), s), &suite.datasets).unwrap());
    (arch, ms)
}

#[test]
fn grid_origin_and_anchors_reproduce_anchor_losses() {
    let (arch, [m1, m2, m3]) = anchors();
    let data = &small_suite(20, 9).datasets[3];
    let plane = surface_plane_basis(&m1.params(), &m2.params(), &m3.params()).unwrap();
    let stats = [m1.running_stats(), m2.running_stats(), m3.running_stats()];
    let loss = |m: &ModelState| m.evaluate(data.features.view(), &data.labels).unwrap().0;
    let at = |ab| surface_loss_at(&arch, &plane, &stats, ab, data, BnPolicy::Interpolate, &[]).unwrap();
    assert_eq!(at((0.0, 0.0)), loss(&m1));
    assert!((at((plane.w2_coords[0], plane.w2_coords[1])) - loss(&m2)).abs() < 1e-9);
    assert!((at((plane.w3_coords[0], plane.w3_coords[1])) - loss(&m3)).abs() < 1e-9);

    let [a2, _] = plane.w2_coords;
    let [a3, b3] = plane.w3_coords;
    let lo = a3.min(0.0) - 0.25 * a2.abs();
    let grid = plane
        .clone()
        .with_grid([lo, a2.max(a3) + 0.25 * a2.abs(), -0.25 * b3, 1.25 * b3], 7)
        .unwrap();
    let rec = surface_grid_losses(&arch, &grid, &stats, data, BnPolicy::Interpolate, &[]).unwrap();
    assert!(rec.losses.iter().flatten().all(|v| v.is_finite()));
}

#[test]
fn divergence_proxy_grows_with_target_rotation() {
    let model = random_model(ArchSpec::new(2, vec![4], 3), 0);
    let specs = rotated_suite_specs(&[0.0, 15.0, 30.0, 45.0], 20, 6);
    let suite = generate_synthetic_suite(&specs).unwrap();
    let sources = &suite.datasets[..1];
    let divs: Vec<f64> = suite
        .datasets
        .iter()
        .map(|t| {
            estimate_bound_terms(&model, sources, t, BoundTermOptions::default())
                .unwrap()
                .sup_divergence
        })
        .collect();
    assert_eq!(divs[0], 0.0);
    assert!(divs.windows(2).all(|w| w[1] >= w[0]), "{divs:?}");
}

#[test]
fn loaded_data_needs_fallback_for_divergence() {
    let model = random_model(ArchSpec::new(2, vec![4], 3), 0);
    let mut suite = small_suite(20, 2);
    for d in &mut suite.datasets {
        d.spec = None;
    }
    let strict = BoundTermOptions {
        knn_fallback: false,
        ..BoundTermOptions::default()
    };
    assert!(estimate_bound_terms(&model, &suite.datasets[1..], &suite.datasets[0], strict).is_err());
    let t = estimate_bound_terms(
        &model,
        &suite.datasets[1..],
        &suite.datasets[0],
        BoundTermOptions::default(),
    )
    .unwrap();
    assert_eq!(t.divergence_method, mvdg::analysis::DivergenceMethod::KnnApproximate);
}
