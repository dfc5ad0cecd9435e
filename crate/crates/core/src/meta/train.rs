use std::time::Instant;

use ndarray::{concatenate, Array2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{erm_step, mvrml_step, reestimate_bn, reptile_step, MetaConfig, Method};
use crate::domains::{leave_one_domain_out, DomainDataset, DomainSuite};
use crate::episodic::sample_pooled_batch;
use crate::nn::{ModelState, OptimizerState};
use crate::rng::RngStream;
use crate::{Error, Result};

const STREAM_INIT: u64 = 1;
const STREAM_SPLIT: u64 = 2;
const STREAM_TRAIN: u64 = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub alpha: f64,
    pub beta: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
    pub target_loss: f64,
    pub target_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub method: Method,
    pub target_index: usize,
    pub target_domain: String,
    pub config: MetaConfig,
    pub history: Vec<EpochRecord>,
    /// Epoch whose end-of-epoch model had the best source-validation accuracy.
    pub best_epoch: Option<usize>,
    /// The selected checkpoint (the initial model when no epoch ran).
    pub model: ModelState,
    /// The model after the last epoch, regardless of selection.
    pub last_model: ModelState,
    /// End-of-epoch models for the requested snapshot epochs, in epoch order.
    pub snapshots: Vec<(usize, ModelState)>,
    pub train_sources: Vec<DomainDataset>,
    pub validation: Option<DomainDataset>,
    pub target: DomainDataset,
    pub wall_time_secs: f64,
}

/// Shuffles a domain with `rng` and holds out `fraction` of it (at least one
/// row, and at least one row left for training) for validation.
pub fn split_train_val(
    d: &DomainDataset,
    fraction: f64,
    rng: RngStream,
) -> Result<(DomainDataset, Option<DomainDataset>)> {
    let n = d.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng.rng());
    let n_val = if n < 2 {
        0
    } else {
        ((fraction * n as f64).round() as usize).clamp(1, n - 1)
    };
    let (val_idx, train_idx) = idx.split_at(n_val);
    let take = |rows: &[usize]| -> Result<DomainDataset> {
        let mut out = DomainDataset::new(
            d.domain_id.clone(),
            d.features.select(Axis(0), rows),
            rows.iter().map(|&i| d.labels[i]).collect(),
        )?;
        out.spec = d.spec.clone();
        Ok(out)
    };
    let val = if n_val > 0 { Some(take(val_idx)?) } else { None };
    Ok((take(train_idx)?, val))
}

fn pool(name: &str, parts: &[DomainDataset]) -> Result<DomainDataset> {
    let views: Vec<_> = parts.iter().map(|d| d.features.view()).collect();
    let features: Array2<f64> = concatenate(Axis(0), &views).map_err(|e| Error::Structure(e.to_string()))?;
    let labels = parts.iter().flat_map(|d| d.labels.iter().copied()).collect();
    DomainDataset::new(name, features, labels)
}

/// Leave-one-domain-out training of one method.
///
/// Each source domain is split into train and validation parts. Every epoch
/// runs `iterations_per_epoch` steps of the method; meta methods then
/// re-estimate batch-norm statistics on the training parts (when enabled).
/// The end-of-epoch model with the best pooled validation accuracy is kept.
pub fn train_model(
    suite: &DomainSuite,
    target_index: usize,
    method: Method,
    config: &MetaConfig,
) -> Result<TrainReport> {
    train_model_with_snapshots(suite, target_index, method, config, &[])
}

/// [`train_model`] that also keeps the end-of-epoch models of
/// `snapshot_epochs`.
pub fn train_model_with_snapshots(
    suite: &DomainSuite,
    target_index: usize,
    method: Method,
    config: &MetaConfig,
    snapshot_epochs: &[usize],
) -> Result<TrainReport> {
    config.validate()?;
    if let Some(&e) = snapshot_epochs.iter().find(|&&e| e >= config.epochs) {
        return Err(Error::IndexOutOfRange {
            index: e,
            len: config.epochs,
        });
    }
    let started = Instant::now();
    let (sources, target) = leave_one_domain_out(suite, target_index)?;

    let split_rng = RngStream::new(config.seed, STREAM_SPLIT);
    let mut train_sources = Vec::with_capacity(sources.len());
    let mut val_parts = Vec::new();
    for (i, d) in sources.iter().enumerate() {
        let (tr, va) = split_train_val(d, config.validation_fraction, split_rng.child(i as u64))?;
        train_sources.push(tr);
        val_parts.extend(va);
    }
    let validation = if val_parts.is_empty() {
        None
    } else {
        Some(pool("validation", &val_parts)?)
    };

    let arch = config.model.arch(suite.feature_dim, suite.num_classes);
    let mut model = ModelState::init(
        arch,
        config.model.bn_momentum,
        &mut RngStream::new(config.seed, STREAM_INIT).rng(),
    )?;

    let method_config = match method {
        Method::Reptile => MetaConfig {
            trajectories_t: 1,
            tasks_per_trajectory_s: 1,
            ..config.clone()
        },
        _ => config.clone(),
    };

    let train_rng = RngStream::new(config.seed, STREAM_TRAIN);
    let mut erm_state = OptimizerState::new(&config.erm_spec(), model.num_params());
    let mut history = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, ModelState)> = None;
    let mut snapshots = Vec::new();

    for epoch in 0..config.epochs {
        let cfg = method_config.at_epoch(epoch);
        for it in 0..config.iterations_per_epoch {
            let rng = train_rng.child((epoch * config.iterations_per_epoch + it) as u64);
            let ctx = || format!("{method} epoch {epoch} iteration {it}");
            model = match method {
                Method::Erm => {
                    let batch = sample_pooled_batch(&train_sources, cfg.batch_size, rng)?;
                    let (next, state, _) =
                        erm_step(&model, &batch, &cfg.erm_spec(), &erm_state).map_err(|e| e.context(ctx()))?;
                    erm_state = state;
                    next
                }
                Method::Reptile => reptile_step(&model, &train_sources, &cfg, rng).map_err(|e| e.context(ctx()))?,
                Method::Mvrml => mvrml_step(&model, &train_sources, &cfg, rng).map_err(|e| e.context(ctx()))?,
            };
        }
        if method != Method::Erm && config.reestimate_bn {
            model = reestimate_bn(&model, &train_sources)?;
        }

        if snapshot_epochs.contains(&epoch) {
            snapshots.push((epoch, model.clone()));
        }

        let (val_loss, val_accuracy) = match &validation {
            Some(v) => model.evaluate(v.features.view(), &v.labels)?,
            None => (f64::NAN, f64::NAN),
        };
        let (target_loss, target_accuracy) = model.evaluate(target.features.view(), &target.labels)?;
        history.push(EpochRecord {
            epoch,
            alpha: cfg.inner_lr_alpha,
            beta: cfg.outer_lr_beta,
            val_loss,
            val_accuracy,
            target_loss,
            target_accuracy,
        });
        log::debug!(
            "{method} target={} epoch {epoch}: val acc {val_accuracy:.4}, target acc {target_accuracy:.4}",
            target.domain_id
        );

        let score = if val_accuracy.is_nan() { -val_loss } else { val_accuracy };
        if best.as_ref().is_none_or(|(s, _, _)| score > *s) {
            best = Some((score, epoch, model.clone()));
        }
    }

    let (best_epoch, selected) = match best {
        Some((_, e, m)) => (Some(e), m),
        None => (None, model.clone()),
    };
    Ok(TrainReport {
        method,
        target_index,
        target_domain: target.domain_id.clone(),
        config: config.clone(),
        history,
        best_epoch,
        model: selected,
        last_model: model,
        snapshots,
        train_sources,
        validation,
        target,
        wall_time_secs: started.elapsed().as_secs_f64(),
    })
}
