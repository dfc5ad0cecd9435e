use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::episodic::SamplingStrategy;
use crate::nn::{ArchSpec, OptimizerSpec};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Erm,
    Reptile,
    Mvrml,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Erm => "erm",
            Method::Reptile => "reptile",
            Method::Mvrml => "mvrml",
        })
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "erm" => Ok(Method::Erm),
            "reptile" => Ok(Method::Reptile),
            "mvrml" => Ok(Method::Mvrml),
            other => Err(Error::InvalidArgument(format!(
                "unknown method `{other}` (expected erm, reptile or mvrml)"
            ))),
        }
    }
}

/// Hidden layout of the classifier; input and output widths come from the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden_dims: Vec<usize>,
    pub batchnorm: bool,
    pub bn_momentum: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden_dims: vec![16],
            batchnorm: true,
            bn_momentum: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn arch(&self, input_dim: usize, num_classes: usize) -> ArchSpec {
        let arch = ArchSpec::new(input_dim, self.hidden_dims.clone(), num_classes);
        if self.batchnorm {
            arch.with_batchnorm_everywhere()
        } else {
            arch
        }
    }
}

/// From `epoch` on, the inner rate is `alpha` and the outer rate `beta`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrBreakpoint {
    pub epoch: usize,
    pub alpha: f64,
    pub beta: f64,
}

/// Hyperparameters shared by all three training methods.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetaConfig {
    /// Number of independent trajectories averaged per outer step.
    pub trajectories_t: usize,
    /// Tasks visited along each trajectory.
    pub tasks_per_trajectory_s: usize,
    pub inner_lr_alpha: f64,
    pub outer_lr_beta: f64,
    /// Decay applied to the outer step as `-beta * outer_weight_decay * theta`.
    pub outer_weight_decay: f64,
    /// Inner-loop rule; its learning rate is replaced by the scheduled alpha.
    pub inner_optimizer: OptimizerSpec,
    /// ERM rule at its own rate, rescaled by schedule breakpoints in
    /// proportion to alpha; `None` reuses `inner_optimizer` at the
    /// scheduled alpha.
    pub erm_optimizer: Option<OptimizerSpec>,
    pub epochs: usize,
    pub iterations_per_epoch: usize,
    pub batch_size: usize,
    pub strategy: SamplingStrategy,
    pub lr_schedule: Vec<LrBreakpoint>,
    /// Re-estimate batch-norm statistics at each epoch end (meta methods only).
    pub reestimate_bn: bool,
    pub validation_fraction: f64,
    pub parallel_trajectories: bool,
    pub model: ModelConfig,
    pub seed: u64,
}

impl Default for MetaConfig {
    fn default() -> Self {
        Self {
            trajectories_t: 3,
            tasks_per_trajectory_s: 3,
            inner_lr_alpha: 0.003,
            outer_lr_beta: 0.3,
            outer_weight_decay: 0.0,
            inner_optimizer: OptimizerSpec::adam(0.003),
            erm_optimizer: Some(OptimizerSpec::adam(0.0003)),
            epochs: 15,
            iterations_per_epoch: 50,
            batch_size: 16,
            strategy: SamplingStrategy::S3MetaSplit,
            lr_schedule: Vec::new(),
            reestimate_bn: true,
            validation_fraction: 0.1,
            parallel_trajectories: true,
            model: ModelConfig::default(),
            seed: 0,
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: &str| {
            Err(Error::Config {
                key: key.into(),
                message: msg.into(),
            })
        };
        if self.trajectories_t == 0 {
            return bad("trajectories_t", "must be positive");
        }
        if self.tasks_per_trajectory_s == 0 {
            return bad("tasks_per_trajectory_s", "must be positive");
        }
        if !(self.inner_lr_alpha > 0.0 && self.inner_lr_alpha.is_finite()) {
            return bad("inner_lr_alpha", "must be positive");
        }
        if !(self.outer_lr_beta > 0.0 && self.outer_lr_beta <= 1.0) {
            return bad("outer_lr_beta", "must lie in (0, 1]");
        }
        if !(self.outer_weight_decay >= 0.0) {
            return bad("outer_weight_decay", "must be non-negative");
        }
        if self.iterations_per_epoch == 0 {
            return bad("iterations_per_epoch", "must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be positive");
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return bad("validation_fraction", "must lie in (0, 1)");
        }
        self.inner_optimizer
            .validate()
            .map_err(|e| e.context("inner_optimizer"))?;
        if let Some(o) = &self.erm_optimizer {
            o.validate().map_err(|e| e.context("erm_optimizer"))?;
        }
        for w in self.lr_schedule.windows(2) {
            if w[1].epoch <= w[0].epoch {
                return bad("lr_schedule", "breakpoint epochs must be strictly increasing");
            }
        }
        for bp in &self.lr_schedule {
            if !(bp.alpha > 0.0) || !(bp.beta > 0.0 && bp.beta <= 1.0) {
                return bad("lr_schedule", "breakpoint rates out of range");
            }
        }
        if self.model.hidden_dims.contains(&0) {
            return bad("model.hidden_dims", "widths must be positive");
        }
        if !(self.model.bn_momentum > 0.0 && self.model.bn_momentum <= 1.0) {
            return bad("model.bn_momentum", "must lie in (0, 1]");
        }
        Ok(())
    }

    /// `(alpha, beta)` in force during `epoch`.
    pub fn rates_at(&self, epoch: usize) -> (f64, f64) {
        self.lr_schedule
            .iter()
            .take_while(|bp| bp.epoch <= epoch)
            .last()
            .map_or((self.inner_lr_alpha, self.outer_lr_beta), |bp| (bp.alpha, bp.beta))
    }

    /// The same config with the rates of `epoch` written into the base
    /// fields. An explicit ERM rate is scaled by the same factor as alpha.
    pub fn at_epoch(&self, epoch: usize) -> MetaConfig {
        let (alpha, beta) = self.rates_at(epoch);
        let erm_optimizer = self
            .erm_optimizer
            .map(|o| o.with_learning_rate(o.learning_rate * (alpha / self.inner_lr_alpha)));
        MetaConfig {
            inner_lr_alpha: alpha,
            outer_lr_beta: beta,
            erm_optimizer,
            ..self.clone()
        }
    }

    pub fn inner_spec(&self) -> OptimizerSpec {
        self.inner_optimizer.with_learning_rate(self.inner_lr_alpha)
    }

    /// An explicit ERM optimizer keeps its own learning rate (rescaled by
    /// [`Self::at_epoch`]); otherwise ERM follows the inner optimizer at the
    /// scheduled alpha.
    pub fn erm_spec(&self) -> OptimizerSpec {
        self.erm_optimizer
            .unwrap_or_else(|| self.inner_optimizer.with_learning_rate(self.inner_lr_alpha))
    }
}
