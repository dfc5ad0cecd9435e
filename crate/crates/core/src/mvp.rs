//! Multi-view prediction.
//!
//! A test input is copied `m` times, each copy passed through a weak random
//! transform, and the model's logits for the copies are averaged before a
//! single softmax. The vector-domain analog of a random resized crop is a
//! global scale draw, plus small Gaussian jitter and an optional sign flip of
//! one coordinate (the analog of a horizontal flip).

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::domains::DomainDataset;
use crate::nn::{argmax, ModelState};
use crate::rng::{RngStream, StreamRng};
use crate::{Error, Result};

/// Jitter multiplier of the strong tier.
pub const STRONG_JITTER_FACTOR: f64 = 4.0;
/// The strong tier draws scales from `[lo * STRONG_SCALE_LO, hi * STRONG_SCALE_HI]`.
pub const STRONG_SCALE_LO: f64 = 0.5;
pub const STRONG_SCALE_HI: f64 = 1.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strength {
    #[default]
    Weak,
    Strong,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransformSpec {
    pub jitter_sigma: f64,
    pub scale_range: [f64; 2],
    pub flip_axis: Option<usize>,
    pub strength: Strength,
}

impl Default for TransformSpec {
    /// Scale in `[0.8, 1]` with light jitter and no flip.
    fn default() -> Self {
        Self {
            jitter_sigma: 0.05,
            scale_range: [0.8, 1.0],
            flip_axis: None,
            strength: Strength::Weak,
        }
    }
}

impl TransformSpec {
    pub fn identity() -> Self {
        Self {
            jitter_sigma: 0.0,
            scale_range: [1.0, 1.0],
            flip_axis: None,
            strength: Strength::Weak,
        }
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        let [lo, hi] = self.scale_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "scale range [{lo}, {hi}] must satisfy 0 < lo <= hi"
            )));
        }
        if !(self.jitter_sigma >= 0.0 && self.jitter_sigma.is_finite()) {
            return Err(Error::InvalidArgument("jitter_sigma must be non-negative".into()));
        }
        if let Some(a) = self.flip_axis {
            if a >= dim {
                return Err(Error::IndexOutOfRange { index: a, len: dim });
            }
        }
        Ok(())
    }

    /// Jitter and scale range after applying the strength tier.
    pub fn effective(&self) -> (f64, [f64; 2]) {
        match self.strength {
            Strength::Weak => (self.jitter_sigma, self.scale_range),
            Strength::Strong => (
                self.jitter_sigma * STRONG_JITTER_FACTOR,
                [
                    self.scale_range[0] * STRONG_SCALE_LO,
                    self.scale_range[1] * STRONG_SCALE_HI,
                ],
            ),
        }
    }
}

fn transform_into(x: &[f64], spec: &TransformSpec, rng: &mut StreamRng, out: &mut [f64]) {
    let (sigma, [lo, hi]) = spec.effective();
    let s = if lo == hi { lo } else { rng.random_range(lo..=hi) };
    for (o, &v) in out.iter_mut().zip(x) {
        *o = if s == 1.0 { v } else { s * v };
    }
    if sigma > 0.0 {
        for o in out.iter_mut() {
            let z: f64 = StandardNormal.sample(rng);
            *o += sigma * z;
        }
    }
    if let Some(axis) = spec.flip_axis {
        if rng.random_bool(0.5) {
            out[axis] = -out[axis];
        }
    }
}

/// `s * x + noise`, with `s` uniform in the scale range and the flip
/// coordinate negated with probability 1/2.
pub fn apply_weak_transform(x: &[f64], spec: &TransformSpec, rng: &mut StreamRng) -> Result<Vec<f64>> {
    spec.validate(x.len())?;
    let mut out = vec![0.0; x.len()];
    transform_into(x, spec, rng, &mut out);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MvpConfig {
    pub num_views_m: usize,
    pub transform: TransformSpec,
    pub seed: u64,
}

impl Default for MvpConfig {
    fn default() -> Self {
        Self {
            num_views_m: 32,
            transform: TransformSpec::default(),
            seed: 0,
        }
    }
}

impl MvpConfig {
    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.num_views_m == 0 {
            return Err(Error::Config {
                key: "num_views_m".into(),
                message: "must be at least 1".into(),
            });
        }
        self.transform.validate(dim)
    }
}

/// Softmax of a single logit vector.
pub fn softmax(logits: &Array1<f64>) -> Array1<f64> {
    let max = logits.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let e = logits.mapv(|v| (v - max).exp());
    let sum = e.sum();
    e / sum
}

/// Mean logits of `views` transformed copies of `x`.
pub fn multiview_logits(
    model: &ModelState,
    x: &[f64],
    views: usize,
    spec: &TransformSpec,
    rng: &mut StreamRng,
) -> Result<Array1<f64>> {
    if views == 0 {
        return Err(Error::InvalidArgument("need at least one view".into()));
    }
    spec.validate(x.len())?;
    let d = x.len();
    let mut copies = Array2::zeros((views, d));
    for mut row in copies.rows_mut() {
        transform_into(x, spec, rng, row.as_slice_mut().expect("contiguous"));
    }
    let logits = model.logits(copies.view())?;
    Ok(logits.sum_axis(Axis(0)) / views as f64)
}

/// `softmax((1/m) * sum_i f(T_i(x)))`, drawing the views from `rng`.
pub fn predict_multiview_with(
    model: &ModelState,
    x: &[f64],
    views: usize,
    spec: &TransformSpec,
    rng: &mut StreamRng,
) -> Result<Array1<f64>> {
    Ok(softmax(&multiview_logits(model, x, views, spec, rng)?))
}

/// Multi-view class probabilities for one input, views drawn from stream
/// `(cfg.seed, 0)`.
pub fn predict_multiview(model: &ModelState, x: &[f64], cfg: &MvpConfig) -> Result<Array1<f64>> {
    cfg.validate(x.len())?;
    let mut rng = RngStream::new(cfg.seed, 0).rng();
    predict_multiview_with(model, x, cfg.num_views_m, &cfg.transform, &mut rng)
}

/// Multi-view predictions for every row of a dataset; row `i` draws its
/// views from stream `(cfg.seed, i)`.
pub fn predict_dataset_multiview(model: &ModelState, data: &DomainDataset, cfg: &MvpConfig) -> Result<Array2<f64>> {
    cfg.validate(data.dim())?;
    let k = model.arch().num_classes;
    let mut out = Array2::zeros((data.len(), k));
    for (i, row) in data.features.rows().into_iter().enumerate() {
        let x = row.to_vec();
        let mut rng = RngStream::new(cfg.seed, i as u64).rng();
        let p = predict_multiview_with(model, &x, cfg.num_views_m, &cfg.transform, &mut rng)?;
        out.row_mut(i).assign(&p);
    }
    Ok(out)
}

/// Accuracy of multi-view predictions (argmax, ties to the lowest class).
pub fn multiview_accuracy(model: &ModelState, data: &DomainDataset, cfg: &MvpConfig) -> Result<f64> {
    let probs = predict_dataset_multiview(model, data, cfg)?;
    let correct = probs
        .rows()
        .into_iter()
        .zip(&data.labels)
        .filter(|(p, &y)| argmax(p.as_slice().expect("contiguous")) == y)
        .count();
    Ok(correct as f64 / data.len() as f64)
}

/// Fraction of (sample, trial) pairs whose single-view prediction on a
/// transformed copy differs from the clean prediction. Sample `i` draws its
/// transforms from `rng.child(i)`.
pub fn prediction_change_rate(
    model: &ModelState,
    data: &DomainDataset,
    spec: &TransformSpec,
    trials: usize,
    rng: RngStream,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Empty("dataset for prediction change rate".into()));
    }
    if trials == 0 {
        return Err(Error::InvalidArgument("trials must be positive".into()));
    }
    spec.validate(data.dim())?;
    let clean: Vec<usize> = model
        .logits(data.features.view())?
        .rows()
        .into_iter()
        .map(|r| argmax(r.as_slice().expect("contiguous")))
        .collect();
    let d = data.dim();
    let mut changed = 0usize;
    for (i, row) in data.features.rows().into_iter().enumerate() {
        let x = row.to_vec();
        let mut gen = rng.child(i as u64).rng();
        let mut copies = Array2::zeros((trials, d));
        for mut c in copies.rows_mut() {
            transform_into(&x, spec, &mut gen, c.as_slice_mut().expect("contiguous"));
        }
        let logits = model.logits(copies.view())?;
        changed += logits
            .rows()
            .into_iter()
            .filter(|r| argmax(r.as_slice().expect("contiguous")) != clean[i])
            .count();
    }
    Ok(changed as f64 / (data.len() * trials) as f64)
}
