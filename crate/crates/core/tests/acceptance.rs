//! Acceptance criteria 1 to 11. Each test writes one `criterion N: PASS|FAIL`
//! line straight to stdout, so the verdicts show even when output capture
//! is on, and then asserts the criterion.

mod common;

use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use common::{random_batch, random_model, random_spec};
use mvdg::analysis::{
    sharpness_probe, surface_loss_at, surface_plane_basis, theorem1_bound, BnPolicy, BoundInputs, SharpnessConfig,
};
use mvdg::cli::{run_command, SuiteSource};
use mvdg::domains::{class_conditional_kl, generate_synthetic_suite, leave_one_domain_out, DomainSpec, KlReduction};
use mvdg::meta::{
    mvrml_step, mvrml_step_with_streams, reestimate_bn, reptile_step, train_model, trajectory_streams, MetaConfig,
    Method,
};
use mvdg::mvp::{multiview_accuracy, prediction_change_rate, MvpConfig};
use mvdg::nn::{finite_difference_gradient, loss_and_grad, ArchSpec, Batch, ModelState};
use mvdg::rng::RngStream;
use rand::Rng;
use rayon::prelude::*;

const SEEDS: u64 = 5;
const TARGETS: usize = 4;
const RADII: usize = 4;
const PCR_TRIALS: usize = 10;
const PCR_STREAM: u64 = 0x5043_5200;

fn verdict(n: u32, pass: bool, detail: &str) {
    let line = format!("criterion {n}: {} {detail}\n", if pass { "PASS" } else { "FAIL" });
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
}

/// Clean, multi-view and stability measurements of one trained model.
#[derive(Debug, Clone)]
struct RunStats {
    accuracy: f64,
    mvp_accuracy: f64,
    pcr: f64,
    sharpness: [f64; RADII],
    curve_variance: f64,
}

#[derive(Debug)]
struct Benchmark {
    /// Indexed `[seed][target]`.
    erm: Vec<Vec<RunStats>>,
    mvrml: Vec<Vec<RunStats>>,
    /// MVRML without epoch-end batch-norm re-estimation; curve variance only.
    mvrml_no_reestimate: Vec<Vec<f64>>,
    elapsed: Duration,
    mvp_elapsed: Duration,
    sharpness_elapsed: Duration,
}

fn variance(v: &[f64]) -> f64 {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64
}

fn measure(
    suite: &mvdg::domains::DomainSuite,
    target: usize,
    method: Method,
    config: &MetaConfig,
    seed: u64,
) -> (RunStats, Duration, Duration) {
    let report = train_model(suite, target, method, config).unwrap();
    let t = &report.target;
    let accuracy = report.model.evaluate(t.features.view(), &t.labels).unwrap().1;
    let started = Instant::now();
    let mvp = MvpConfig {
        seed,
        ..MvpConfig::default()
    };
    let mvp_accuracy = multiview_accuracy(&report.model, t, &mvp).unwrap();
    let mvp_time = started.elapsed();
    let pcr = prediction_change_rate(
        &report.model,
        t,
        &mvp.transform,
        PCR_TRIALS,
        RngStream::new(seed, PCR_STREAM),
    )
    .unwrap();
    let started = Instant::now();
    let sc = SharpnessConfig {
        seed,
        ..SharpnessConfig::default()
    };
    let rec = sharpness_probe(&report.model, t, &sc).unwrap();
    let sharp_time = started.elapsed();
    let mut sharpness = [0.0; RADII];
    for (s, p) in sharpness.iter_mut().zip(&rec.points) {
        *s = p.sharpness;
    }
    let curve: Vec<f64> = report.history.iter().map(|e| e.target_accuracy).collect();
    (
        RunStats {
            accuracy,
            mvp_accuracy,
            pcr,
            sharpness,
            curve_variance: variance(&curve),
        },
        mvp_time,
        sharp_time,
    )
}

/// 5 seeds x 4 held-out targets x {ERM, MVRML}, on the default rotated
/// suite and default training config. Data seed equals run seed.
fn benchmark() -> &'static Benchmark {
    static CELL: OnceLock<Benchmark> = OnceLock::new();
    CELL.get_or_init(|| {
        let started = Instant::now();
        let jobs: Vec<(u64, usize)> = (0..SEEDS).flat_map(|s| (0..TARGETS).map(move |t| (s, t))).collect();
        let suites: Vec<_> = (0..SEEDS).map(|s| SuiteSource::default().load(s).unwrap()).collect();
        let results: Vec<_> = jobs
            .par_iter()
            .map(|&(seed, target)| {
                let suite = &suites[seed as usize];
                let cfg = MetaConfig {
                    seed,
                    ..MetaConfig::default()
                };
                let (erm, m1, s1) = measure(suite, target, Method::Erm, &cfg, seed);
                let (mvrml, m2, s2) = measure(suite, target, Method::Mvrml, &cfg, seed);
                let plain = MetaConfig {
                    reestimate_bn: false,
                    ..cfg.clone()
                };
                let report = train_model(suite, target, Method::Mvrml, &plain).unwrap();
                let curve: Vec<f64> = report.history.iter().map(|e| e.target_accuracy).collect();
                (erm, mvrml, variance(&curve), m1 + m2, s1 + s2)
            })
            .collect();
        let mut b = Benchmark {
            erm: vec![Vec::new(); SEEDS as usize],
            mvrml: vec![Vec::new(); SEEDS as usize],
            mvrml_no_reestimate: vec![Vec::new(); SEEDS as usize],
            elapsed: Duration::ZERO,
            mvp_elapsed: Duration::ZERO,
            sharpness_elapsed: Duration::ZERO,
        };
        for ((seed, _), (erm, mvrml, var, mvp_t, sharp_t)) in jobs.into_iter().zip(results) {
            b.erm[seed as usize].push(erm);
            b.mvrml[seed as usize].push(mvrml);
            b.mvrml_no_reestimate[seed as usize].push(var);
            b.mvp_elapsed += mvp_t;
            b.sharpness_elapsed += sharp_t;
        }
        b.elapsed = started.elapsed();
        b
    })
}

/// Mean over seeds of `f`, per target.
fn per_target(runs: &[Vec<RunStats>], f: impl Fn(&RunStats) -> f64) -> Vec<f64> {
    (0..TARGETS)
        .map(|t| runs.iter().map(|s| f(&s[t])).sum::<f64>() / runs.len() as f64)
        .collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn criterion_01_gradient_oracle() {
    let started = Instant::now();
    let archs = [
        ArchSpec::new(2, vec![4], 3),
        ArchSpec::new(3, vec![6], 3).with_batchnorm_everywhere(),
        ArchSpec::new(4, vec![5, 4], 2),
        ArchSpec::new(2, vec![8, 6], 4).with_batchnorm_everywhere(),
        ArchSpec::new(5, vec![3], 5).with_batchnorm_everywhere(),
        ArchSpec::new(3, vec![], 3),
    ];
    let mut worst = 0.0f64;
    for (i, arch) in archs.into_iter().enumerate() {
        let m = random_model(arch.clone(), 1000 + i as u64);
        let b = random_batch(arch.input_dim, arch.num_classes, 10, 2000 + i as u64);
        let (_, g) = loss_and_grad(&m, &b).unwrap();
        let fd = finite_difference_gradient(&m, &b, 1e-5).unwrap();
        for (a, f) in g.iter().zip(&fd) {
            worst = worst.max((a - f).abs() / a.abs().max(f.abs()).max(1e-6));
        }
    }
    let secs = started.elapsed().as_secs_f64();
    let pass = worst <= 1e-4 && secs < 10.0;
    verdict(
        1,
        pass,
        &format!("max relative error {worst:.2e} over 6 configs, {secs:.2}s"),
    );
    assert!(pass);
}

#[test]
fn criterion_02_exact_reductions() {
    let started = Instant::now();
    let suite = common::small_suite(50, 12);
    let (sources, _) = leave_one_domain_out(&suite, 1).unwrap();
    let theta = random_model(ArchSpec::new(2, vec![8], 3).with_batchnorm_everywhere(), 21);
    let cfg = MetaConfig {
        batch_size: 16,
        ..MetaConfig::default()
    };
    let rng = RngStream::new(31, 5);
    let one = MetaConfig {
        trajectories_t: 1,
        tasks_per_trajectory_s: 1,
        ..cfg.clone()
    };
    let reduction =
        mvrml_step(&theta, &sources, &one, rng).unwrap() == reptile_step(&theta, &sources, &one, rng).unwrap();
    let frozen = MetaConfig {
        outer_lr_beta: 0.0,
        ..cfg.clone()
    };
    let identity = mvrml_step(&theta, &sources, &frozen, rng).unwrap() == theta
        && reptile_step(&theta, &sources, &frozen, rng).unwrap() == theta;
    // Reptile runs its one trajectory on child 0 of its stream.
    let first = trajectory_streams(rng, 1)[0];
    let shared = mvrml_step_with_streams(&theta, &sources, &cfg, &[first; 3]).unwrap();
    let single = MetaConfig {
        trajectories_t: 1,
        ..cfg.clone()
    };
    let collapse = shared == mvrml_step_with_streams(&theta, &sources, &single, &[first]).unwrap()
        && shared == reptile_step(&theta, &sources, &cfg, rng).unwrap();
    let secs = started.elapsed().as_secs_f64();
    let pass = reduction && identity && collapse && secs < 5.0;
    verdict(
        2,
        pass,
        &format!("T=s=1 equals reptile: {reduction}, beta 0 identity: {identity}, shared stream collapse: {collapse}, {secs:.2}s"),
    );
    assert!(pass);
}

#[test]
fn criterion_03_benchmark_gap() {
    let b = benchmark();
    let erm = per_target(&b.erm, |r| r.accuracy);
    let mvrml = per_target(&b.mvrml, |r| r.accuracy);
    let gap = mean(&mvrml) - mean(&erm);
    let pass = gap >= 0.02 && b.elapsed < Duration::from_secs(600);
    verdict(
        3,
        pass,
        &format!(
            "MVRML {:.4} vs ERM {:.4}, gap {:+.2}pp (need >= +2pp); per target ERM {erm:.4?} MVRML {mvrml:.4?}; {:.1}s",
            mean(&mvrml),
            mean(&erm),
            100.0 * gap,
            b.elapsed.as_secs_f64()
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_04_multiview_prediction() {
    let b = benchmark();
    let clean = mean(&per_target(&b.mvrml, |r| r.accuracy));
    let mvp = mean(&per_target(&b.mvrml, |r| r.mvp_accuracy));
    let pass = mvp - clean >= 0.0 && b.mvp_elapsed < Duration::from_secs(120);
    verdict(
        4,
        pass,
        &format!(
            "MVRML with 32 views {mvp:.4} vs clean {clean:.4}, delta {:+.2}pp; {:.1}s",
            100.0 * (mvp - clean),
            b.mvp_elapsed.as_secs_f64()
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_05_prediction_change_rate() {
    let b = benchmark();
    let erm = per_target(&b.erm, |r| r.pcr);
    let mvrml = per_target(&b.mvrml, |r| r.pcr);
    let pass = erm.iter().zip(&mvrml).all(|(e, m)| e > m);
    verdict(5, pass, &format!("per target ERM {erm:.4?} MVRML {mvrml:.4?}"));
    assert!(pass);
}

#[test]
fn criterion_06_sharpness() {
    let b = benchmark();
    let avg = |runs: &[Vec<RunStats>]| -> Vec<f64> {
        (0..RADII)
            .map(|k| {
                let all: Vec<f64> = runs.iter().flatten().map(|r| r.sharpness[k]).collect();
                mean(&all)
            })
            .collect()
    };
    let (erm, mvrml) = (avg(&b.erm), avg(&b.mvrml));
    let flatter = erm.iter().zip(&mvrml).filter(|(e, m)| m <= e).count();
    let pass = flatter >= 3 && b.sharpness_elapsed < Duration::from_secs(120);
    verdict(
        6,
        pass,
        &format!(
            "MVRML <= ERM at {flatter}/4 radii (need 3); ERM {erm:.4?} MVRML {mvrml:.4?}; {:.1}s",
            b.sharpness_elapsed.as_secs_f64()
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_07_bound_evaluator() {
    let started = Instant::now();
    let worked = BoundInputs {
        empirical_risk: 0.1,
        sup_divergence: 0.2,
        beta1: 0.01,
        beta2: 0.02,
        n_sequences: 100,
        delta: 0.1,
        loss_bound_m: 1.0,
    };
    let hand = 0.1 + 0.1 + 0.02 + 5.0 * (10f64.ln() / 200.0).sqrt() + 0.04;
    let value = theorem1_bound(&worked).unwrap();
    let exact = (value - hand).abs() <= 1e-9;

    let at = |c: f64, n: u64, m: u64| {
        theorem1_bound(&BoundInputs {
            beta1: c / n as f64,
            beta2: c / (m as f64).sqrt(),
            n_sequences: n,
            ..worked.clone()
        })
        .unwrap()
    };
    let mut monotone = true;
    for c in [0.001, 0.01, 0.1, 1.0] {
        for fixed in [1u64, 10, 100, 1000] {
            for k in 1..1000u64 {
                monotone &= at(c, k + 1, fixed) <= at(c, k, fixed);
                monotone &= at(c, fixed, k + 1) <= at(c, fixed, k);
            }
        }
    }
    let secs = started.elapsed().as_secs_f64();
    let pass = exact && monotone && secs < 1.0;
    verdict(
        7,
        pass,
        &format!(
            "worked example {value:.9} vs {hand:.9}; non-increasing in n and m over 1..1000: {monotone}; {secs:.3}s"
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_08_surface_plane() {
    let started = Instant::now();
    let mut rng = RngStream::new(77, 0).rng();
    let (mut ortho, mut recon) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let mut draw = || -> Vec<f64> { (0..50).map(|_| rng.random_range(-3.0..3.0)).collect() };
        let (w1, w2, w3) = (draw(), draw(), draw());
        let p = surface_plane_basis(&w1, &w2, &w3).unwrap();
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        ortho = ortho
            .max(dot(&p.basis_u, &p.basis_v).abs())
            .max((dot(&p.basis_u, &p.basis_u) - 1.0).abs())
            .max((dot(&p.basis_v, &p.basis_v) - 1.0).abs());
        for (w, [a, b]) in [(&w2, p.w2_coords), (&w3, p.w3_coords)] {
            for (x, y) in p.point(a, b).iter().zip(w.iter()) {
                recon = recon.max((x - y).abs());
            }
        }
    }
    let arch = ArchSpec::new(2, vec![6], 3).with_batchnorm_everywhere();
    let suite = common::small_suite(30, 4);
    let anchors: Vec<ModelState> = (0..3)
        .map(|s| reestimate_bn(&random_model(arch.clone(), 40 + s), &suite.datasets).unwrap())
        .collect();
    let plane = surface_plane_basis(&anchors[0].params(), &anchors[1].params(), &anchors[2].params()).unwrap();
    let stats = [
        anchors[0].running_stats(),
        anchors[1].running_stats(),
        anchors[2].running_stats(),
    ];
    let data = &suite.datasets[2];
    let origin = surface_loss_at(&arch, &plane, &stats, (0.0, 0.0), data, BnPolicy::Interpolate, &[]).unwrap();
    let w1_loss = anchors[0].evaluate(data.features.view(), &data.labels).unwrap().0;
    let secs = started.elapsed().as_secs_f64();
    let pass = ortho <= 1e-10 && recon <= 1e-10 && origin == w1_loss && secs < 5.0;
    verdict(
        8,
        pass,
        &format!(
            "orthonormality {ortho:.1e}, reconstruction {recon:.1e} over 100 triples, origin loss {origin} vs w1 {w1_loss}; {secs:.2}s"
        ),
    );
    assert!(pass);
}

/// Monte-Carlo KL: samples of `a` drawn by the generator itself, scored
/// under both diagonal Gaussians, averaged per class.
fn monte_carlo_kl(a: &DomainSpec, b: &DomainSpec, n: usize) -> f64 {
    let sampled = DomainSpec {
        samples_per_class: n,
        ..a.clone()
    };
    let data = &generate_synthetic_suite(&[sampled]).unwrap().datasets[0];
    let log_density = |x: &[f64], mean: &[f64], var: &[f64]| -> f64 {
        x.iter()
            .zip(mean)
            .zip(var)
            .map(|((x, m), v)| -0.5 * ((x - m).powi(2) / v + v.ln() + std::f64::consts::TAU.ln()))
            .sum()
    };
    let k = a.num_classes();
    let mut total = 0.0;
    for class in 0..k {
        let (ma, mb) = (a.transformed_mean(class), b.transformed_mean(class));
        let rows = data.class_rows(class);
        let sum: f64 = rows
            .rows()
            .into_iter()
            .map(|r| {
                let x = r.as_slice().unwrap();
                log_density(x, &ma, &a.class_cov_diag[class]) - log_density(x, &mb, &b.class_cov_diag[class])
            })
            .sum();
        total += sum / n as f64;
    }
    total / k as f64
}

#[test]
fn criterion_09_divergence() {
    let started = Instant::now();
    let mut worst = 0.0f64;
    for i in 0..10u64 {
        let a = random_spec(2, 3, 500 + i);
        let b = random_spec(2, 3, 900 + i);
        let closed = class_conditional_kl(&a, &b, KlReduction::MeanOverClasses).unwrap();
        let mc = monte_carlo_kl(&a, &b, 100_000);
        worst = worst.max((mc - closed).abs() / closed);
    }
    let secs = started.elapsed().as_secs_f64();
    let pass = worst <= 0.02 && secs < 30.0;
    verdict(
        9,
        pass,
        &format!(
            "worst relative gap {:.3}% over 10 spec pairs at 1e5 samples; {secs:.2}s",
            100.0 * worst
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_10_batchnorm_reestimation() {
    let started = Instant::now();
    let arch = ArchSpec::new(2, vec![7, 5], 3).with_batchnorm_everywhere();
    let suite = common::small_suite(40, 6);
    let model = random_model(arch.clone(), 8);
    let once = reestimate_bn(&model, &suite.datasets).unwrap();
    let twice = reestimate_bn(&once, &suite.datasets).unwrap();
    let idem = once
        .running_stats()
        .iter()
        .zip(twice.running_stats())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);

    let data = &suite.datasets[0];
    let unit = ModelState::init(arch, 1.0, &mut RngStream::new(8, 0).rng()).unwrap();
    let whole = Batch::new(data.features.clone(), data.labels.clone()).unwrap();
    let (_, copied) = unit.forward(&whole, mvdg::nn::Mode::Train).unwrap();
    let single = reestimate_bn(&unit, std::slice::from_ref(data)).unwrap();
    let batch_gap = single
        .running_stats()
        .iter()
        .zip(copied.running_stats())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let unit_secs = started.elapsed().as_secs_f64();

    let b = benchmark();
    let with: f64 = b.mvrml.iter().flatten().map(|r| r.curve_variance).sum();
    let without: f64 = b.mvrml_no_reestimate.iter().flatten().sum();
    let pass = idem < 1e-12
        && batch_gap <= 1e-12
        && with < without
        && b.elapsed + Duration::from_secs_f64(unit_secs) < Duration::from_secs(300);
    verdict(
        10,
        pass,
        &format!(
            "idempotence {idem:.1e}, single batch {batch_gap:.1e}; accuracy-curve variance with re-estimation {with:.3e} vs without {without:.3e}"
        ),
    );
    assert!(pass);
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((
                    p.strip_prefix(dir).unwrap().display().to_string(),
                    fs::read(&p).unwrap(),
                ));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn criterion_11_cli_determinism() {
    const CONFIG: &str = r#"{
      "suite": {"rotated": {"angles_deg": [0, 15, 30, 45], "samples_per_class": 40}},
      "meta": {"epochs": 3, "iterations_per_epoch": 5, "batch_size": 8},
      "mvp": {"num_views_m": 8},
      "pcr_trials": 3,
      "analysis": {"sharpness": true, "bound": true, "surface": true, "surface_resolution": 4}
    }"#;
    let root = tempfile::TempDir::new().unwrap();
    let cfg = root.path().join("config.json");
    fs::write(&cfg, CONFIG).unwrap();
    let c = cfg.to_str().unwrap();
    let session = |name: &str| -> Vec<(String, Vec<u8>)> {
        let base = root.path().join(name);
        let p = |s: &str| base.join(s).to_str().unwrap().to_string();
        let run = |args: Vec<String>| {
            let code = run_command(std::iter::once("mvdg".to_string()).chain(args));
            assert_eq!(code, 0);
        };
        let v = |a: &[&str]| a.iter().map(|s| s.to_string()).collect::<Vec<_>>();
        run(v(&["gen-data", "--config", c, "--out", &p("data")]));
        for m in ["erm", "reptile", "mvrml"] {
            let t = p(&format!("train_{m}"));
            run(v(&[
                "train",
                "--config",
                c,
                "--out",
                &t,
                "--method",
                m,
                "--seed",
                "5",
                "--target-index",
                "1",
            ]));
            let ck = format!("{t}/checkpoint.json");
            run(v(&[
                "eval",
                "--config",
                c,
                "--out",
                &p(&format!("eval_{m}")),
                "--checkpoint",
                &ck,
            ]));
            run(v(&[
                "mvp-eval",
                "--config",
                c,
                "--out",
                &p(&format!("runs/{m}")),
                "--checkpoint",
                &ck,
            ]));
            run(v(&[
                "sharpness",
                "--config",
                c,
                "--out",
                &p(&format!("sharp_{m}")),
                "--checkpoint",
                &ck,
            ]));
            run(v(&[
                "bound",
                "--config",
                c,
                "--out",
                &p(&format!("bound_{m}")),
                "--checkpoint",
                &ck,
            ]));
        }
        let anchors: Vec<String> = ["erm", "reptile", "mvrml"]
            .iter()
            .map(|m| p(&format!("train_{m}/checkpoint.json")))
            .collect();
        let mut args = v(&["surface", "--config", c, "--out", &p("surface"), "--anchors"]);
        args.extend(anchors);
        run(args);
        run(v(&["report", "--inputs", &p("runs"), "--out", &p("report")]));
        tree(&base)
    };
    let (a, b) = (session("first"), session("second"));
    let names: Vec<&str> = a.iter().map(|(n, _)| n.as_str()).collect();
    let same = a == b;
    let pass = same && a.len() >= 20;
    verdict(
        11,
        pass,
        &format!(
            "{} artifacts compared bitwise across two sessions: identical {same}",
            names.len()
        ),
    );
    assert!(pass);
}
