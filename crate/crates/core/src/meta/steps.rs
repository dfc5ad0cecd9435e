use rayon::prelude::*;

use super::{Learner, MetaConfig};
use crate::domains::DomainDataset;
use crate::episodic::{sample_task_sequence, Task};
use crate::nn::{optimizer_step_flat, Batch, OptimizerSpec, OptimizerState};
use crate::rng::RngStream;
use crate::{Error, Result};

/// Runs one trajectory from a copy of `theta_j`: for each task, a step on
/// its meta-train batch, then a step on its meta-test batch. The inner
/// optimizer starts from fresh state.
pub fn inner_trajectory<L: Learner>(
    theta_j: &L,
    tasks: &[Task],
    alpha: f64,
    inner_optimizer: &OptimizerSpec,
) -> Result<L> {
    if tasks.is_empty() {
        return Err(Error::Empty("trajectory has no tasks".into()));
    }
    let spec = inner_optimizer.with_learning_rate(alpha);
    let mut model = theta_j.clone();
    let mut params = model.params();
    let mut state = OptimizerState::new(&spec, params.len());
    for task in tasks {
        for batch in [&task.meta_train, &task.meta_test] {
            let (_, grad) = model.train_loss_and_grad(batch)?;
            optimizer_step_flat(&mut params, &grad, &spec, &mut state)?;
            model.set_params(&params)?;
        }
    }
    Ok(model)
}

/// The outer update from pre-drawn task sequences, one per trajectory:
/// average the trajectory end points in index order, then move `theta_j`
/// a fraction `beta` of the way there.
pub fn mvrml_update<L: Learner>(
    theta_j: &L,
    sequences: &[Vec<Task>],
    alpha: f64,
    beta: f64,
    inner_optimizer: &OptimizerSpec,
    outer_weight_decay: f64,
    parallel: bool,
) -> Result<L> {
    if sequences.is_empty() {
        return Err(Error::Empty("no trajectories".into()));
    }
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::InvalidArgument(format!("outer rate {beta} outside [0, 1]")));
    }
    let run = |(t, tasks): (usize, &Vec<Task>)| {
        inner_trajectory(theta_j, tasks, alpha, inner_optimizer).map_err(|e| e.context(format!("trajectory {t}")))
    };
    let ends: Vec<L> = if parallel {
        sequences.par_iter().enumerate().map(run).collect::<Result<_>>()?
    } else {
        sequences.iter().enumerate().map(run).collect::<Result<_>>()?
    };
    let averaged = L::average(&ends)?;
    let mut next = theta_j.interpolate(&averaged, beta)?;
    if outer_weight_decay > 0.0 && beta > 0.0 {
        let base = theta_j.params();
        let mut p = next.params();
        for (v, b) in p.iter_mut().zip(&base) {
            *v -= beta * outer_weight_decay * b;
        }
        next.set_params(&p)?;
    }
    Ok(next)
}

/// Per-trajectory streams of one outer step: trajectory `t` draws from
/// child `t` of `rng`.
pub fn trajectory_streams(rng: RngStream, trajectories: usize) -> Vec<RngStream> {
    (0..trajectories as u64).map(|t| rng.child(t)).collect()
}

/// One MVRML outer step with explicit per-trajectory streams.
pub fn mvrml_step_with_streams<L: Learner>(
    theta_j: &L,
    sources: &[DomainDataset],
    config: &MetaConfig,
    streams: &[RngStream],
) -> Result<L> {
    let sequences = streams
        .iter()
        .map(|&s| {
            sample_task_sequence(
                sources,
                config.strategy,
                config.batch_size,
                config.tasks_per_trajectory_s,
                s,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    mvrml_update(
        theta_j,
        &sequences,
        config.inner_lr_alpha,
        config.outer_lr_beta,
        &config.inner_optimizer,
        config.outer_weight_decay,
        config.parallel_trajectories,
    )
}

/// One MVRML outer step: `T` trajectories of `s` tasks each on distinct
/// streams, averaged, then interpolated from `theta_j`.
pub fn mvrml_step<L: Learner>(
    theta_j: &L,
    sources: &[DomainDataset],
    config: &MetaConfig,
    rng: RngStream,
) -> Result<L> {
    let streams = trajectory_streams(rng, config.trajectories_t);
    mvrml_step_with_streams(theta_j, sources, config, &streams)
}

/// Reptile: [`mvrml_step`] with a single trajectory. The baseline trainer
/// also sets one task per trajectory.
pub fn reptile_step<L: Learner>(
    theta_j: &L,
    sources: &[DomainDataset],
    config: &MetaConfig,
    rng: RngStream,
) -> Result<L> {
    let single = MetaConfig {
        trajectories_t: 1,
        ..config.clone()
    };
    mvrml_step(theta_j, sources, &single, rng)
}

/// One supervised step on a pooled batch. Returns the batch loss measured
/// before the update.
pub fn erm_step<L: Learner>(
    theta: &L,
    batch: &Batch,
    optimizer: &OptimizerSpec,
    state: &OptimizerState,
) -> Result<(L, OptimizerState, f64)> {
    let mut model = theta.clone();
    let (loss, grad) = model.train_loss_and_grad(batch)?;
    let mut params = model.params();
    let mut state = state.clone();
    optimizer_step_flat(&mut params, &grad, optimizer, &mut state)?;
    model.set_params(&params)?;
    Ok((model, state, loss))
}
