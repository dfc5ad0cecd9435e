use std::path::{Path, PathBuf};
use std::time::Instant;

use super::records::{aggregate_metrics, write_report_csv, MetricsRecord, TrainRecord, RECORD_FORMAT_VERSION};
use super::{load_config, Command, CommonArgs, ExperimentConfig};
use crate::analysis::{
    estimate_bound_terms, sharpness_probe, surface_grid_losses, surface_plane_basis, BoundInputs, BoundReport,
    BoundTermOptions,
};
use crate::domains::{leave_one_domain_out, write_csv_suite, DomainDataset};
use crate::meta::{train_model_with_snapshots, Checkpoint, CheckpointMeta, Method};
use crate::mvp::{multiview_accuracy, prediction_change_rate};
use crate::nn::ModelState;
use crate::rng::RngStream;
use crate::{Error, Result};

/// Stream id of the prediction-change-rate transforms (multi-view
/// prediction uses per-sample streams of the experiment seed).
const STREAM_PCR: u64 = 0x5043_5200;

/// Files produced by one command, written together at the end.
#[derive(Default)]
struct Artifacts(Vec<(&'static str, Vec<u8>)>);

impl Artifacts {
    fn json<T: serde::Serialize>(&mut self, name: &'static str, value: &T) -> Result<()> {
        let mut text = serde_json::to_vec_pretty(value)?;
        text.push(b'\n');
        self.0.push((name, text));
        Ok(())
    }

    fn raw(&mut self, name: &'static str, bytes: Vec<u8>) {
        self.0.push((name, bytes));
    }

    /// Writes every file to a temporary name first and renames only once
    /// all writes succeeded.
    fn commit(self, out: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        let mut staged = Vec::with_capacity(self.0.len());
        for (name, bytes) in &self.0 {
            let tmp = out.join(format!(".{name}.partial"));
            if let Err(e) = std::fs::write(&tmp, bytes) {
                for (t, _) in &staged {
                    let _ = std::fs::remove_file(t);
                }
                let _ = std::fs::remove_file(&tmp);
                return Err(Error::io(&tmp, e));
            }
            staged.push((tmp, out.join(name)));
        }
        for (tmp, dest) in &staged {
            std::fs::rename(tmp, dest).map_err(|e| Error::io(dest, e))?;
        }
        Ok(staged.into_iter().map(|(_, d)| d).collect())
    }
}

/// Config file (or defaults), then checkpoint metadata, then flags.
fn resolve(common: &CommonArgs, ckpt: Option<&CheckpointMeta>) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => load_config(p)?,
        None => ExperimentConfig::default(),
    };
    let seed = common.seed.or(ckpt.map(|m| m.seed)).unwrap_or(cfg.seed);
    cfg = cfg.with_seed(seed);
    if let Some(t) = common.target_index.or(ckpt.map(|m| m.target_index)) {
        cfg.target_index = t;
    }
    if let Some(m) = common.method.or(ckpt.map(|m| m.method)) {
        cfg.method = m;
    }
    if let Some(v) = common.views {
        cfg.mvp.num_views_m = v;
    }
    if let Some(s) = common.strategy {
        cfg.meta.strategy = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

struct Split {
    sources: Vec<DomainDataset>,
    target: DomainDataset,
}

fn load_split(cfg: &ExperimentConfig) -> Result<Split> {
    let suite = cfg.suite.load(cfg.seed)?;
    if cfg.target_index >= suite.len() {
        return Err(Error::Config {
            key: "target_index".into(),
            message: format!("index {} but the suite has {} domains", cfg.target_index, suite.len()),
        });
    }
    let (sources, target) = leave_one_domain_out(&suite, cfg.target_index)?;
    Ok(Split { sources, target })
}

fn load_checkpoint(path: &Path) -> Result<(ModelState, Option<CheckpointMeta>)> {
    let ck = Checkpoint::load(path).map_err(|e| e.context(format!("checkpoint {}", path.display())))?;
    Ok((ck.to_model()?, ck.meta))
}

fn check_target(meta: Option<&CheckpointMeta>, target: &DomainDataset) -> Result<()> {
    if let Some(m) = meta {
        if m.target_domain != target.domain_id {
            return Err(Error::InvalidArgument(format!(
                "checkpoint was trained with target `{}` but the data resolves to target `{}`",
                m.target_domain, target.domain_id
            )));
        }
    }
    Ok(())
}

/// Number of trajectory sequences drawn by a full training run.
fn sequences_drawn(cfg: &ExperimentConfig) -> u64 {
    let per_step = match cfg.method {
        Method::Mvrml => cfg.meta.trajectories_t,
        _ => 1,
    };
    (cfg.meta.epochs * cfg.meta.iterations_per_epoch * per_step) as u64
}

/// Epochs whose end-of-epoch models anchor the surface plane made by `train`.
fn surface_epochs(epochs: usize) -> Result<[usize; 3]> {
    if epochs < 3 {
        return Err(Error::Config {
            key: "meta.epochs".into(),
            message: "the surface analysis needs at least three epochs".into(),
        });
    }
    Ok([epochs / 3 - 1, 2 * epochs / 3 - 1, epochs - 1])
}

fn bound_report(
    cfg: &ExperimentConfig,
    model: Option<(&ModelState, &Split)>,
    overrides: BoundOverrides,
) -> Result<BoundReport> {
    let s = &cfg.analysis.bound_settings;
    let estimated = match model {
        Some((m, split)) if overrides.empirical_risk.is_none() || overrides.sup_divergence.is_none() => {
            let opts = BoundTermOptions {
                knn_fallback: s.knn_fallback,
                knn_k: s.knn_k,
            };
            Some(estimate_bound_terms(m, &split.sources, &split.target, opts)?)
        }
        _ => None,
    };
    let need = |flag: Option<f64>, est: Option<f64>, key: &str| {
        flag.or(est).ok_or_else(|| Error::Config {
            key: key.into(),
            message: "give the value or a --checkpoint to estimate it from".into(),
        })
    };
    let inputs = BoundInputs {
        empirical_risk: need(
            overrides.empirical_risk,
            estimated.as_ref().map(|t| t.empirical_risk),
            "empirical_risk",
        )?,
        sup_divergence: need(
            overrides.sup_divergence,
            estimated.as_ref().map(|t| t.sup_divergence),
            "sup_divergence",
        )?,
        beta1: overrides.beta1.unwrap_or(s.beta1),
        beta2: overrides.beta2.unwrap_or(s.beta2),
        n_sequences: overrides
            .n_sequences
            .or(s.n_sequences)
            .unwrap_or_else(|| sequences_drawn(cfg)),
        delta: overrides.delta.unwrap_or(s.delta),
        loss_bound_m: overrides.loss_bound_m.unwrap_or(s.loss_bound_m),
    };
    let mut report = BoundReport::new(inputs)?;
    report.estimated_terms = estimated;
    Ok(report)
}

#[derive(Default, Clone, Copy)]
struct BoundOverrides {
    empirical_risk: Option<f64>,
    sup_divergence: Option<f64>,
    beta1: Option<f64>,
    beta2: Option<f64>,
    n_sequences: Option<u64>,
    delta: Option<f64>,
    loss_bound_m: Option<f64>,
}

fn clean_metrics(
    cfg: &ExperimentConfig,
    model: &ModelState,
    meta: Option<&CheckpointMeta>,
    target: &DomainDataset,
) -> Result<MetricsRecord> {
    let (loss, acc) = model.evaluate(target.features.view(), &target.labels)?;
    Ok(MetricsRecord {
        format_version: RECORD_FORMAT_VERSION,
        method: cfg.method,
        seed: cfg.seed,
        target_index: cfg.target_index,
        target_domain: target.domain_id.clone(),
        clean_accuracy: acc,
        clean_loss: loss,
        mvp_accuracy: None,
        num_views: None,
        pcr: None,
        pcr_trials: None,
        history: meta.map(|m| m.history.clone()).unwrap_or_default(),
        wall_time_secs: if cfg.record_wall_time {
            meta.and_then(|m| m.wall_time_secs)
        } else {
            None
        },
    })
}

fn collect_metrics_files(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    fn walk(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
        let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
            .collect::<Result<_>>()?;
        entries.sort();
        for p in entries {
            if p.is_dir() {
                walk(&p, out)?;
            } else if p.file_name().is_some_and(|n| n == "metrics.json") {
                out.push(p);
            }
        }
        Ok(())
    }
    let mut files = Vec::new();
    for p in inputs {
        if p.is_dir() {
            walk(p, &mut files)?;
        } else {
            files.push(p.clone());
        }
    }
    if files.is_empty() {
        return Err(Error::Empty("no metrics.json files among the report inputs".into()));
    }
    Ok(files)
}

/// Runs one subcommand and returns the paths it wrote.
pub fn execute(command: &Command) -> Result<Vec<PathBuf>> {
    let mut art = Artifacts::default();
    let out = match command {
        Command::GenData(common) => {
            let cfg = resolve(common, None)?;
            let suite = cfg.suite.load(cfg.seed)?;
            let mut buf = Vec::new();
            write_csv_suite(&suite, &mut buf)?;
            art.raw("suite.csv", buf);
            &common.out
        }
        Command::Train(common) => {
            let cfg = resolve(common, None)?;
            let suite = cfg.suite.load(cfg.seed)?;
            let snapshot_epochs = if cfg.analysis.surface {
                surface_epochs(cfg.meta.epochs)?.to_vec()
            } else {
                Vec::new()
            };
            let started = Instant::now();
            let report = train_model_with_snapshots(&suite, cfg.target_index, cfg.method, &cfg.meta, &snapshot_epochs)?;
            let wall = cfg.record_wall_time.then(|| started.elapsed().as_secs_f64());
            let (target_loss, target_accuracy) = report
                .model
                .evaluate(report.target.features.view(), &report.target.labels)?;
            let meta = CheckpointMeta {
                method: cfg.method,
                seed: cfg.seed,
                target_index: cfg.target_index,
                target_domain: report.target_domain.clone(),
                best_epoch: report.best_epoch,
                history: report.history.clone(),
                wall_time_secs: wall,
            };
            art.json("checkpoint.json", &Checkpoint::from_model(&report.model, Some(meta)))?;
            art.json(
                "train_report.json",
                &TrainRecord {
                    format_version: RECORD_FORMAT_VERSION,
                    method: cfg.method,
                    seed: cfg.seed,
                    target_index: cfg.target_index,
                    target_domain: report.target_domain.clone(),
                    best_epoch: report.best_epoch,
                    train_samples: report.train_sources.iter().map(DomainDataset::len).sum(),
                    validation_samples: report.validation.as_ref().map_or(0, DomainDataset::len),
                    target_samples: report.target.len(),
                    target_accuracy,
                    target_loss,
                    history: report.history.clone(),
                    wall_time_secs: wall,
                    config: cfg.clone(),
                },
            )?;
            if cfg.analysis.sharpness {
                let rec = sharpness_probe(&report.model, &report.target, &cfg.analysis.sharpness_config)?;
                art.json("sharpness.json", &rec)?;
            }
            if cfg.analysis.bound {
                let split = Split {
                    sources: report.train_sources.clone(),
                    target: report.target.clone(),
                };
                let rec = bound_report(&cfg, Some((&report.model, &split)), BoundOverrides::default())?;
                art.json("bound.json", &rec)?;
            }
            if cfg.analysis.surface {
                let anchors: Vec<&ModelState> = report.snapshots.iter().map(|(_, m)| m).collect();
                art.json(
                    "surface.json",
                    &surface_record(&cfg, &anchors, &report.train_sources, &report.target, None)?,
                )?;
            }
            &common.out
        }
        Command::Eval { common, checkpoint } => {
            let (model, meta) = load_checkpoint(checkpoint)?;
            let cfg = resolve(common, meta.as_ref())?;
            let split = load_split(&cfg)?;
            check_target(meta.as_ref(), &split.target)?;
            art.json(
                "metrics.json",
                &clean_metrics(&cfg, &model, meta.as_ref(), &split.target)?,
            )?;
            &common.out
        }
        Command::MvpEval {
            common,
            checkpoint,
            pcr_trials,
        } => {
            let (model, meta) = load_checkpoint(checkpoint)?;
            let mut cfg = resolve(common, meta.as_ref())?;
            if let Some(t) = pcr_trials {
                cfg.pcr_trials = *t;
                cfg.validate()?;
            }
            let split = load_split(&cfg)?;
            check_target(meta.as_ref(), &split.target)?;
            let mut rec = clean_metrics(&cfg, &model, meta.as_ref(), &split.target)?;
            rec.mvp_accuracy = Some(multiview_accuracy(&model, &split.target, &cfg.mvp)?);
            rec.num_views = Some(cfg.mvp.num_views_m);
            rec.pcr = Some(prediction_change_rate(
                &model,
                &split.target,
                &cfg.mvp.transform,
                cfg.pcr_trials,
                RngStream::new(cfg.seed, STREAM_PCR),
            )?);
            rec.pcr_trials = Some(cfg.pcr_trials);
            art.json("metrics.json", &rec)?;
            &common.out
        }
        Command::Sharpness { common, checkpoint } => {
            let (model, meta) = load_checkpoint(checkpoint)?;
            let cfg = resolve(common, meta.as_ref())?;
            let split = load_split(&cfg)?;
            check_target(meta.as_ref(), &split.target)?;
            art.json(
                "sharpness.json",
                &sharpness_probe(&model, &split.target, &cfg.analysis.sharpness_config)?,
            )?;
            &common.out
        }
        Command::Surface {
            common,
            anchors,
            resolution,
            bn_policy,
        } => {
            let loaded = anchors.iter().map(|p| load_checkpoint(p)).collect::<Result<Vec<_>>>()?;
            let mut cfg = resolve(common, loaded[0].1.as_ref())?;
            if let Some(r) = resolution {
                cfg.analysis.surface_resolution = *r;
            }
            if let Some(p) = bn_policy {
                cfg.analysis.surface_bn_policy = *p;
            }
            cfg.validate()?;
            let split = load_split(&cfg)?;
            let models: Vec<&ModelState> = loaded.iter().map(|(m, _)| m).collect();
            art.json(
                "surface.json",
                &surface_record(&cfg, &models, &split.sources, &split.target, None)?,
            )?;
            &common.out
        }
        Command::Bound {
            common,
            checkpoint,
            empirical_risk,
            sup_divergence,
            beta1,
            beta2,
            n_sequences,
            delta,
            loss_bound_m,
        } => {
            let loaded = checkpoint.as_deref().map(load_checkpoint).transpose()?;
            let cfg = resolve(common, loaded.as_ref().and_then(|(_, m)| m.as_ref()))?;
            let overrides = BoundOverrides {
                empirical_risk: *empirical_risk,
                sup_divergence: *sup_divergence,
                beta1: *beta1,
                beta2: *beta2,
                n_sequences: *n_sequences,
                delta: *delta,
                loss_bound_m: *loss_bound_m,
            };
            let needs_data = empirical_risk.is_none() || sup_divergence.is_none();
            let rec = match &loaded {
                Some((model, meta)) if needs_data => {
                    let split = load_split(&cfg)?;
                    check_target(meta.as_ref(), &split.target)?;
                    bound_report(&cfg, Some((model, &split)), overrides)?
                }
                _ => bound_report(&cfg, None, overrides)?,
            };
            art.json("bound.json", &rec)?;
            &common.out
        }
        Command::Report { inputs, out } => {
            let files = collect_metrics_files(inputs)?;
            let records = files
                .iter()
                .map(|p| {
                    let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                    serde_json::from_str::<MetricsRecord>(&text)
                        .map_err(|e| Error::from(e).context(format!("metrics file {}", p.display())))
                })
                .collect::<Result<Vec<_>>>()?;
            let rows = aggregate_metrics(&records)?;
            let mut buf = Vec::new();
            write_report_csv(&rows, &mut buf)?;
            art.raw("report.csv", buf);
            out
        }
    };
    art.commit(out)
}

fn surface_record(
    cfg: &ExperimentConfig,
    anchors: &[&ModelState],
    sources: &[DomainDataset],
    target: &DomainDataset,
    extent: Option<[f64; 4]>,
) -> Result<crate::analysis::SurfaceRecord> {
    let [a, b, c] = anchors else {
        return Err(Error::InvalidArgument(format!(
            "the surface needs 3 anchors, got {}",
            anchors.len()
        )));
    };
    if a.arch() != b.arch() || a.arch() != c.arch() {
        return Err(Error::Structure("surface anchors differ in architecture".into()));
    }
    let plane = surface_plane_basis(&a.params(), &b.params(), &c.params())?;
    let extent = extent.unwrap_or(plane.grid_extent);
    let plane = plane.with_grid(extent, cfg.analysis.surface_resolution)?;
    let stats = [a.running_stats(), b.running_stats(), c.running_stats()];
    surface_grid_losses(
        a.arch(),
        &plane,
        &stats,
        target,
        cfg.analysis.surface_bn_policy,
        sources,
    )
}
