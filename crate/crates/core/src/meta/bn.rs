use ndarray::{s, Array1, Axis};

use crate::domains::DomainDataset;
use crate::nn::ModelState;
use crate::{Error, Result};

const CHUNK: usize = 256;

/// Count, mean and summed squared deviation, merged chunk by chunk.
struct Moments {
    count: f64,
    mean: Array1<f64>,
    m2: Array1<f64>,
}

impl Moments {
    fn new(width: usize) -> Self {
        Self {
            count: 0.0,
            mean: Array1::zeros(width),
            m2: Array1::zeros(width),
        }
    }

    fn merge(&mut self, chunk: &ndarray::Array2<f64>) {
        let nb = chunk.nrows() as f64;
        let mean_b = chunk.sum_axis(Axis(0)) / nb;
        let centered = chunk - &mean_b;
        let m2_b = (&centered * &centered).sum_axis(Axis(0));
        if self.count == 0.0 {
            self.count = nb;
            self.mean = mean_b;
            self.m2 = m2_b;
            return;
        }
        let na = self.count;
        let n = na + nb;
        let delta = &mean_b - &self.mean;
        self.mean = &self.mean + &(&delta * (nb / n));
        self.m2 = &self.m2 + &m2_b + &(&delta * &delta * (na * nb / n));
        self.count = n;
    }
}

/// Replaces every batch-norm running statistic with the exact mean and
/// (biased) variance of its input over all source data. Layers are
/// processed in order, each one seeing inputs normalized by the already
/// re-estimated layers before it, so the result equals train-mode
/// normalization over a single batch holding the whole dataset. Weights are
/// untouched.
pub fn reestimate_bn(model: &ModelState, sources: &[DomainDataset]) -> Result<ModelState> {
    if sources.is_empty() || sources.iter().all(|d| d.is_empty()) {
        return Err(Error::Empty("no data to re-estimate batch norm statistics".into()));
    }
    let mut out = model.clone();
    let bn_layers: Vec<usize> = (0..out.norms.len()).filter(|&i| out.norms[i].is_some()).collect();
    for layer in bn_layers {
        let width = out.arch().hidden_dims[layer];
        let mut moments = Moments::new(width);
        for d in sources {
            for start in (0..d.len()).step_by(CHUNK) {
                let end = (start + CHUNK).min(d.len());
                let z = out.pre_norm_activations(d.features.slice(s![start..end, ..]), layer)?;
                moments.merge(&z);
            }
        }
        let bn = out.norms[layer].as_mut().expect("filtered to batch-norm layers");
        bn.running_var = &moments.m2 / moments.count;
        bn.running_mean = moments.mean;
    }
    Ok(out)
}
