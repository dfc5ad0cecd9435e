use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::domains::DomainDataset;
use crate::nn::ModelState;
use crate::rng::RngStream;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SharpnessConfig {
    pub radii_gamma: Vec<f64>,
    pub perturbations_per_radius: usize,
    pub seed: u64,
}

impl Default for SharpnessConfig {
    fn default() -> Self {
        Self {
            radii_gamma: vec![0.01, 0.05, 0.1, 0.2],
            perturbations_per_radius: 10,
            seed: 0,
        }
    }
}

impl SharpnessConfig {
    pub fn validate(&self) -> Result<()> {
        let key = |k: &str, m: &str| {
            Err(Error::Config {
                key: k.into(),
                message: m.into(),
            })
        };
        if self.radii_gamma.is_empty() {
            return key("radii_gamma", "must not be empty");
        }
        if self.radii_gamma.iter().any(|&g| !(g > 0.0 && g.is_finite())) {
            return key("radii_gamma", "radii must be positive and finite");
        }
        if self.radii_gamma.windows(2).any(|w| w[0] >= w[1]) {
            return key("radii_gamma", "radii must be strictly increasing");
        }
        if self.perturbations_per_radius == 0 {
            return key("perturbations_per_radius", "must be at least 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SharpnessPoint {
    pub gamma: f64,
    /// Mean of `L(theta + eps) - L(theta)`; positive near a minimum.
    pub sharpness: f64,
    /// Standard error of that mean (0 with a single perturbation).
    pub std_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SharpnessRecord {
    pub format_version: u32,
    pub config: SharpnessConfig,
    pub base_loss: f64,
    pub points: Vec<SharpnessPoint>,
}

/// Sharpness of an arbitrary loss at `theta`. Perturbation `k` uses the
/// standard normal direction drawn from stream `(cfg.seed, k)`, scaled by
/// each radius, so every radius sees the same directions.
pub fn sharpness_of<F>(theta: &[f64], mut loss: F, cfg: &SharpnessConfig) -> Result<(f64, Vec<SharpnessPoint>)>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    cfg.validate()?;
    let base = loss(theta)?;
    let directions: Vec<Vec<f64>> = (0..cfg.perturbations_per_radius as u64)
        .map(|k| {
            let mut rng = RngStream::new(cfg.seed, k).rng();
            (0..theta.len()).map(|_| StandardNormal.sample(&mut rng)).collect()
        })
        .collect();
    let mut probe = vec![0.0; theta.len()];
    let mut points = Vec::with_capacity(cfg.radii_gamma.len());
    for &gamma in &cfg.radii_gamma {
        let mut gaps = Vec::with_capacity(directions.len());
        for z in &directions {
            for ((p, &t), &e) in probe.iter_mut().zip(theta).zip(z) {
                *p = t + gamma * e;
            }
            gaps.push(loss(&probe)? - base);
        }
        let n = gaps.len() as f64;
        let mean = gaps.iter().sum::<f64>() / n;
        let std_error = if gaps.len() > 1 {
            (gaps.iter().map(|g| (g - mean).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt()
        } else {
            0.0
        };
        points.push(SharpnessPoint {
            gamma,
            sharpness: mean,
            std_error,
        });
    }
    Ok((base, points))
}

/// Sharpness of a model on a dataset: learnable parameters are perturbed,
/// batch-norm running statistics are held fixed, and the loss is eval-mode
/// mean cross-entropy.
pub fn sharpness_probe(model: &ModelState, dataset: &DomainDataset, cfg: &SharpnessConfig) -> Result<SharpnessRecord> {
    if dataset.is_empty() {
        return Err(Error::Empty("sharpness dataset".into()));
    }
    let mut scratch = model.clone();
    let (base_loss, points) = sharpness_of(
        &model.params(),
        |p| {
            scratch.set_params(p)?;
            Ok(scratch.evaluate(dataset.features.view(), &dataset.labels)?.0)
        },
        cfg,
    )?;
    Ok(SharpnessRecord {
        format_version: super::ANALYSIS_FORMAT_VERSION,
        config: cfg.clone(),
        base_loss,
        points,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quadratic(p: &[f64]) -> Result<f64> {
        Ok(p.iter().map(|v| v * v).sum())
    }

    #[test]
    fn quadratic_expectation() {
        let d = 20;
        let cfg = SharpnessConfig {
            radii_gamma: vec![0.1, 0.5, 1.0],
            perturbations_per_radius: 200,
            seed: 4,
        };
        let (_, pts) = sharpness_of(&vec![0.0; d], quadratic, &cfg).unwrap();
        for p in &pts {
            let expected = d as f64 * p.gamma * p.gamma;
            assert!((p.sharpness - expected).abs() <= 3.0 * p.std_error, "{p:?}");
        }
        assert!(pts.windows(2).all(|w| w[0].sharpness < w[1].sharpness));
    }

    #[test]
    fn rejects_unsorted_radii() {
        let cfg = SharpnessConfig {
            radii_gamma: vec![0.2, 0.1],
            ..SharpnessConfig::default()
        };
        assert!(sharpness_of(&[0.0], quadratic, &cfg).is_err());
    }
}
