use serde::{Deserialize, Serialize};

use super::ModelState;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// Update rule and its hyperparameters. Fields that do not apply to `kind`
/// are ignored.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerSpec {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for OptimizerSpec {
    fn default() -> Self {
        Self::adam(1e-3)
    }
}

impl OptimizerSpec {
    pub fn sgd(learning_rate: f64) -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            learning_rate,
            weight_decay: 0.0,
            momentum: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn adam(learning_rate: f64) -> Self {
        Self {
            kind: OptimizerKind::Adam,
            ..Self::sgd(learning_rate)
        }
    }

    pub fn with_learning_rate(mut self, lr: f64) -> Self {
        self.learning_rate = lr;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidArgument(format!("optimizer {what}")));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be non-negative");
        }
        match self.kind {
            OptimizerKind::Sgd if !(0.0..1.0).contains(&self.momentum) => bad("momentum must lie in [0, 1)"),
            OptimizerKind::Adam if !(self.beta1 > 0.0 && self.beta1 < 1.0 && self.beta2 > 0.0 && self.beta2 < 1.0) => {
                bad("betas must lie in (0, 1)")
            }
            OptimizerKind::Adam if !(self.epsilon > 0.0) => bad("epsilon must be positive"),
            _ => Ok(()),
        }
    }
}

/// Per-run optimizer memory. Velocity is used by SGD, the two moments by Adam.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct OptimizerState {
    pub step_count: u64,
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub velocity: Vec<f64>,
}

impl OptimizerState {
    pub fn new(spec: &OptimizerSpec, num_params: usize) -> Self {
        match spec.kind {
            OptimizerKind::Sgd => Self {
                velocity: vec![0.0; num_params],
                ..Self::default()
            },
            OptimizerKind::Adam => Self {
                first_moment: vec![0.0; num_params],
                second_moment: vec![0.0; num_params],
                ..Self::default()
            },
        }
    }

    fn ensure_len(&mut self, spec: &OptimizerSpec, n: usize) -> Result<()> {
        let buffers: &mut [&mut Vec<f64>] = match spec.kind {
            OptimizerKind::Sgd => &mut [&mut self.velocity],
            OptimizerKind::Adam => &mut [&mut self.first_moment, &mut self.second_moment],
        };
        for buf in buffers.iter_mut() {
            if buf.is_empty() && self.step_count == 0 {
                buf.resize(n, 0.0);
            } else if buf.len() != n {
                return Err(Error::dim("optimizer state", n, buf.len()));
            }
        }
        Ok(())
    }
}

/// Applies one update to a flat parameter vector in place.
pub fn optimizer_step_flat(
    params: &mut [f64],
    grad: &[f64],
    spec: &OptimizerSpec,
    state: &mut OptimizerState,
) -> Result<()> {
    if grad.len() != params.len() {
        return Err(Error::dim("gradient", params.len(), grad.len()));
    }
    state.ensure_len(spec, params.len())?;
    state.step_count += 1;
    let lr = spec.learning_rate;
    let wd = spec.weight_decay;
    match spec.kind {
        OptimizerKind::Sgd => {
            for ((p, &g), v) in params.iter_mut().zip(grad).zip(state.velocity.iter_mut()) {
                let g = g + wd * *p;
                *v = spec.momentum * *v + g;
                *p -= lr * *v;
            }
        }
        OptimizerKind::Adam => {
            let t = state.step_count as i32;
            let c1 = 1.0 - spec.beta1.powi(t);
            let c2 = 1.0 - spec.beta2.powi(t);
            for (((p, &g), m), v) in params
                .iter_mut()
                .zip(grad)
                .zip(state.first_moment.iter_mut())
                .zip(state.second_moment.iter_mut())
            {
                let g = g + wd * *p;
                *m = spec.beta1 * *m + (1.0 - spec.beta1) * g;
                *v = spec.beta2 * *v + (1.0 - spec.beta2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p -= lr * m_hat / (v_hat.sqrt() + spec.epsilon);
            }
        }
    }
    Ok(())
}

/// One optimizer step on a model's learnable parameters. Running
/// statistics are copied through untouched.
pub fn optimizer_step(
    model: &ModelState,
    grad: &[f64],
    spec: &OptimizerSpec,
    state: &OptimizerState,
) -> Result<(ModelState, OptimizerState)> {
    let mut params = model.params();
    let mut state = state.clone();
    optimizer_step_flat(&mut params, grad, spec, &mut state)?;
    Ok((model.with_params(&params)?, state))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_single_step() {
        let mut p = vec![1.0];
        let mut s = OptimizerState::default();
        optimizer_step_flat(&mut p, &[2.0], &OptimizerSpec::sgd(0.1), &mut s).unwrap();
        assert!((p[0] - 0.8).abs() < 1e-15);
        assert_eq!(s.step_count, 1);
    }

    #[test]
    fn sgd_zero_grad_is_fixed_point() {
        let mut p = vec![1.5, -2.0];
        let mut s = OptimizerState::default();
        optimizer_step_flat(&mut p, &[0.0, 0.0], &OptimizerSpec::sgd(0.1), &mut s).unwrap();
        assert_eq!(p, vec![1.5, -2.0]);
    }

    #[test]
    fn adam_first_step() {
        // m_hat = g, v_hat = g^2 at t = 1, so the step is lr * g / (|g| + eps).
        let mut p = vec![1.0];
        let mut s = OptimizerState::default();
        optimizer_step_flat(&mut p, &[0.5], &OptimizerSpec::adam(1e-3), &mut s).unwrap();
        let expected = 1.0 - 1e-3 * 0.5 / (0.5 + 1e-8);
        assert!((p[0] - expected).abs() < 1e-15);
        assert!((p[0] - 0.999).abs() < 1e-10);
    }

    #[test]
    fn weight_decay_adds_to_grad() {
        let mut p = vec![2.0];
        let mut s = OptimizerState::default();
        let spec = OptimizerSpec {
            weight_decay: 0.5,
            ..OptimizerSpec::sgd(0.1)
        };
        optimizer_step_flat(&mut p, &[0.0], &spec, &mut s).unwrap();
        assert!((p[0] - 1.9).abs() < 1e-15);
    }

    #[test]
    fn sgd_momentum_accumulates() {
        let mut p = vec![0.0];
        let mut s = OptimizerState::default();
        let spec = OptimizerSpec {
            momentum: 0.5,
            ..OptimizerSpec::sgd(1.0)
        };
        optimizer_step_flat(&mut p, &[1.0], &spec, &mut s).unwrap();
        optimizer_step_flat(&mut p, &[1.0], &spec, &mut s).unwrap();
        assert!((p[0] + 2.5).abs() < 1e-15);
    }

    #[test]
    fn length_mismatch() {
        let mut p = vec![0.0, 1.0];
        let mut s = OptimizerState::default();
        assert!(optimizer_step_flat(&mut p, &[1.0], &OptimizerSpec::sgd(0.1), &mut s).is_err());
    }

    #[test]
    fn spec_validation() {
        assert!(OptimizerSpec::sgd(0.1).validate().is_ok());
        assert!(OptimizerSpec::sgd(0.0).validate().is_err());
        assert!(OptimizerSpec {
            momentum: 1.0,
            ..OptimizerSpec::sgd(0.1)
        }
        .validate()
        .is_err());
        assert!(OptimizerSpec {
            beta2: 1.0,
            ..OptimizerSpec::adam(0.1)
        }
        .validate()
        .is_err());
    }
}
