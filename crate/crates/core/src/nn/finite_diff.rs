//! Central-difference gradients, used as a test oracle for the analytic
//! backward pass.

use super::{loss_and_grad, Batch, ModelState};
use crate::{Error, Result};

/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate.
pub fn central_difference<F>(mut f: F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!("step {h} must be positive")));
    }
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let up = f(&probe)?;
        probe[i] = orig - h;
        let down = f(&probe)?;
        probe[i] = orig;
        grad.push((up - down) / (2.0 * h));
    }
    Ok(grad)
}

/// Finite-difference estimate of the train-mode mean cross-entropy gradient.
///
/// Batch-norm layers normalize with the statistics of the batch at each
/// probed point, so this differentiates the same function as
/// [`loss_and_grad`]. Running statistics play no part.
pub fn finite_difference_gradient(model: &ModelState, batch: &Batch, h: f64) -> Result<Vec<f64>> {
    let mut probe = model.clone();
    central_difference(
        |p| {
            probe.set_params(p)?;
            Ok(loss_and_grad(&probe, batch)?.0)
        },
        &model.params(),
        h,
    )
}
