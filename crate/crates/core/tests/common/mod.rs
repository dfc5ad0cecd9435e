#![allow(dead_code)]

use mvdg::domains::{generate_synthetic_suite, rotated_suite_specs, DomainSpec, DomainSuite};
use mvdg::meta::Learner;
use mvdg::nn::{ArchSpec, Batch, ModelState};
use mvdg::rng::RngStream;
use mvdg::Result;
use rand::Rng;

/// Scalar learner with loss `mean_i (theta - c_i)^2`, where `c_i` is the
/// first feature of row `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarStub {
    pub theta: f64,
}

impl Learner for ScalarStub {
    fn params(&self) -> Vec<f64> {
        vec![self.theta]
    }

    fn set_params(&mut self, params: &[f64]) -> Result<()> {
        self.theta = params[0];
        Ok(())
    }

    fn train_loss_and_grad(&mut self, batch: &Batch) -> Result<(f64, Vec<f64>)> {
        let n = batch.len() as f64;
        let col = batch.features.column(0);
        let loss = col.iter().map(|c| (self.theta - c).powi(2)).sum::<f64>() / n;
        let grad = col.iter().map(|c| 2.0 * (self.theta - c)).sum::<f64>() / n;
        Ok((loss, vec![grad]))
    }

    fn interpolate(&self, other: &Self, beta: f64) -> Result<Self> {
        let theta = if beta == 1.0 {
            other.theta
        } else {
            self.theta + beta * (other.theta - self.theta)
        };
        Ok(Self { theta })
    }

    fn average(models: &[Self]) -> Result<Self> {
        let v: Vec<Vec<f64>> = models.iter().map(|m| m.params()).collect();
        Ok(Self {
            theta: mvdg::meta::running_mean(&v)[0],
        })
    }
}

/// One-row batch whose single feature is `c`.
pub fn constant_batch(c: f64) -> Batch {
    Batch::from_rows(&[vec![c]], vec![0]).unwrap()
}

pub fn random_batch(dim: usize, classes: usize, rows: usize, seed: u64) -> Batch {
    let mut rng = RngStream::new(seed, 1).rng();
    let feats: Vec<Vec<f64>> = (0..rows)
        .map(|_| (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect())
        .collect();
    let labels = (0..rows).map(|_| rng.random_range(0..classes)).collect();
    Batch::from_rows(&feats, labels).unwrap()
}

pub fn random_model(arch: ArchSpec, seed: u64) -> ModelState {
    ModelState::init(arch, 0.1, &mut RngStream::new(seed, 0).rng()).unwrap()
}

pub fn small_suite(samples_per_class: usize, seed: u64) -> DomainSuite {
    generate_synthetic_suite(&rotated_suite_specs(&[0.0, 15.0, 30.0, 45.0], samples_per_class, seed)).unwrap()
}

pub fn random_spec(dim: usize, classes: usize, seed: u64) -> DomainSpec {
    let mut rng = RngStream::new(seed, 7).rng();
    DomainSpec {
        domain_id: format!("d{seed}"),
        rotation_deg: rng.random_range(0.0..360.0),
        shift: (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
        scale: rng.random_range(0.5..2.0),
        class_means: (0..classes)
            .map(|_| (0..dim).map(|_| rng.random_range(-3.0..3.0)).collect())
            .collect(),
        class_cov_diag: (0..classes)
            .map(|_| (0..dim).map(|_| rng.random_range(0.2..2.0)).collect())
            .collect(),
        samples_per_class: 10,
        seed,
    }
}
