//! Minimal differentiable model core.
//!
//! Dense ReLU networks with optional batch normalization after hidden layers,
//! mean cross-entropy loss, hand-written reverse-mode gradients and the two
//! optimizers the trainers use (SGD with momentum, Adam).
//!
//! All arithmetic is `f64`. Parameters are exposed as one flat vector whose
//! layout is, per dense layer in order: weight (row-major, `out x in`), bias,
//! then `gamma` and `beta` when a batch-norm layer follows it. Batch-norm
//! running statistics are not learnable and never appear in that vector.

mod finite_diff;
mod model;
mod optim;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub use finite_diff::{central_difference, finite_difference_gradient};
pub use model::{
    argmax, cross_entropy, interpolate_params, loss_and_grad, softmax_rows, BatchNorm, Dense, Mode, ModelState, BN_EPS,
};
pub use optim::{optimizer_step, optimizer_step_flat, OptimizerKind, OptimizerSpec, OptimizerState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
}

/// Shape of a dense classifier.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub num_classes: usize,
    /// Hidden-layer indices followed by a batch-norm layer.
    #[serde(default)]
    pub use_batchnorm_after: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
}

impl ArchSpec {
    pub fn new(input_dim: usize, hidden_dims: Vec<usize>, num_classes: usize) -> Self {
        Self {
            input_dim,
            hidden_dims,
            num_classes,
            use_batchnorm_after: Vec::new(),
            activation: Activation::Relu,
        }
    }

    /// Same architecture with batch norm after every hidden layer.
    pub fn with_batchnorm_everywhere(mut self) -> Self {
        self.use_batchnorm_after = (0..self.hidden_dims.len()).collect();
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::InvalidArgument("input_dim must be positive".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::InvalidArgument("num_classes must be at least 2".into()));
        }
        if let Some(i) = self.hidden_dims.iter().position(|&h| h == 0) {
            return Err(Error::InvalidArgument(format!("hidden_dims[{i}] must be positive")));
        }
        let mut seen = vec![false; self.hidden_dims.len()];
        for &i in &self.use_batchnorm_after {
            if i >= self.hidden_dims.len() {
                return Err(Error::InvalidArgument(format!(
                    "batch norm index {i} is not a hidden layer (have {})",
                    self.hidden_dims.len()
                )));
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(Error::InvalidArgument(format!("duplicate batch norm index {i}")));
            }
        }
        Ok(())
    }

    /// `(in, out)` for every dense layer, output layer last.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 1);
        let mut prev = self.input_dim;
        for &h in &self.hidden_dims {
            dims.push((prev, h));
            prev = h;
        }
        dims.push((prev, self.num_classes));
        dims
    }

    pub fn has_batchnorm(&self, hidden_index: usize) -> bool {
        self.use_batchnorm_after.contains(&hidden_index)
    }

    /// Length of the flattened learnable parameter vector.
    pub fn num_params(&self) -> usize {
        let dense: usize = self.layer_dims().iter().map(|&(i, o)| i * o + o).sum();
        let bn: usize = self
            .hidden_dims
            .iter()
            .enumerate()
            .filter(|(i, _)| self.has_batchnorm(*i))
            .map(|(_, &h)| 2 * h)
            .sum();
        dense + bn
    }
}

/// A labeled mini-batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(features: Array2<f64>, labels: Vec<usize>) -> Result<Self> {
        if features.nrows() == 0 {
            return Err(Error::Empty("batch has no rows".into()));
        }
        if features.nrows() != labels.len() {
            return Err(Error::dim("batch labels", features.nrows(), labels.len()));
        }
        Ok(Self { features, labels })
    }

    /// Builds a batch from row slices.
    pub fn from_rows(rows: &[Vec<f64>], labels: Vec<usize>) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if let Some(r) = rows.iter().find(|r| r.len() != dim) {
            return Err(Error::dim("batch row", dim, r.len()));
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let features = Array2::from_shape_vec((rows.len(), dim), flat).map_err(|e| Error::Structure(e.to_string()))?;
        Self::new(features, labels)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.features.view()
    }
}
