//! Trainers: MVRML, the Reptile baseline, ERM, and batch-norm re-estimation.
//!
//! The step functions are generic over [`Learner`] so the exact-arithmetic
//! properties (reductions, neutrality, averaging order) can be checked on
//! tiny closed-form objectives as well as on [`ModelState`].

mod bn;
mod checkpoint;
mod config;
mod steps;
mod train;

use crate::nn::{interpolate_params, Batch, ModelState};
use crate::Result;

pub use bn::reestimate_bn;
pub use checkpoint::{Checkpoint, CheckpointMeta, CHECKPOINT_FORMAT_VERSION};
pub use config::{LrBreakpoint, MetaConfig, Method, ModelConfig};
pub use steps::{
    erm_step, inner_trajectory, mvrml_step, mvrml_step_with_streams, mvrml_update, reptile_step, trajectory_streams,
};
pub use train::{split_train_val, train_model, train_model_with_snapshots, EpochRecord, TrainReport};

/// Something the trainers can optimize: a flat parameter vector, a
/// train-mode gradient, and the weight-space operations of the outer update.
pub trait Learner: Clone + Send + Sync {
    fn params(&self) -> Vec<f64>;

    fn set_params(&mut self, params: &[f64]) -> Result<()>;

    /// Mean loss and gradient in training mode. Implementations may refresh
    /// internal statistics (batch-norm running stats) as a side effect.
    fn train_loss_and_grad(&mut self, batch: &Batch) -> Result<(f64, Vec<f64>)>;

    /// `self + beta * (other - self)`; exact at `beta` 0 and 1.
    fn interpolate(&self, other: &Self, beta: f64) -> Result<Self>;

    /// Element-wise mean in slice order. Equal inputs give that input back
    /// bit for bit.
    fn average(models: &[Self]) -> Result<Self>;
}

/// Running mean `m_k = m_{k-1} + (x_k - m_{k-1}) / k`. Unlike sum-then-divide
/// it returns a repeated input exactly.
pub fn running_mean(vectors: &[Vec<f64>]) -> Vec<f64> {
    let mut it = vectors.iter();
    let Some(first) = it.next() else {
        return Vec::new();
    };
    let mut mean = first.clone();
    for (k, v) in it.enumerate() {
        let count = (k + 2) as f64;
        for (m, x) in mean.iter_mut().zip(v) {
            *m += (x - *m) / count;
        }
    }
    mean
}

impl Learner for ModelState {
    fn params(&self) -> Vec<f64> {
        ModelState::params(self)
    }

    fn set_params(&mut self, params: &[f64]) -> Result<()> {
        ModelState::set_params(self, params)
    }

    fn train_loss_and_grad(&mut self, batch: &Batch) -> Result<(f64, Vec<f64>)> {
        ModelState::train_loss_and_grad(self, batch)
    }

    fn interpolate(&self, other: &Self, beta: f64) -> Result<Self> {
        interpolate_params(self, other, beta)
    }

    fn average(models: &[Self]) -> Result<Self> {
        let first = models
            .first()
            .ok_or_else(|| crate::Error::Empty("no models to average".into()))?;
        if let Some(m) = models.iter().find(|m| m.arch() != first.arch()) {
            return Err(crate::Error::Structure(format!(
                "cannot average architectures {:?} and {:?}",
                first.arch(),
                m.arch()
            )));
        }
        let params: Vec<Vec<f64>> = models.iter().map(ModelState::params).collect();
        let stats: Vec<Vec<f64>> = models.iter().map(ModelState::running_stats).collect();
        let mut out = first.clone();
        out.set_params(&running_mean(&params))?;
        out.set_running_stats(&running_mean(&stats))?;
        Ok(out)
    }
}
