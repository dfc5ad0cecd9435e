use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::ExperimentConfig;
use crate::domains::write_csv_version;
use crate::meta::{EpochRecord, Method};
use crate::{Error, Result};

pub const RECORD_FORMAT_VERSION: u32 = 1;

/// Summary of one `train` run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub format_version: u32,
    pub method: Method,
    pub seed: u64,
    pub target_index: usize,
    pub target_domain: String,
    pub best_epoch: Option<usize>,
    pub train_samples: usize,
    pub validation_samples: usize,
    pub target_samples: usize,
    pub target_accuracy: f64,
    pub target_loss: f64,
    pub history: Vec<EpochRecord>,
    pub wall_time_secs: Option<f64>,
    pub config: ExperimentConfig,
}

/// Held-out metrics of one trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub format_version: u32,
    pub method: Method,
    pub seed: u64,
    pub target_index: usize,
    pub target_domain: String,
    pub clean_accuracy: f64,
    pub clean_loss: f64,
    pub mvp_accuracy: Option<f64>,
    pub num_views: Option<usize>,
    pub pcr: Option<f64>,
    pub pcr_trials: Option<usize>,
    pub history: Vec<EpochRecord>,
    pub wall_time_secs: Option<f64>,
}

impl MetricsRecord {
    pub fn validate(&self) -> Result<()> {
        if self.format_version != RECORD_FORMAT_VERSION {
            return Err(Error::Unsupported(format!(
                "metrics format_version {} (this build reads {RECORD_FORMAT_VERSION})",
                self.format_version
            )));
        }
        let in_unit = |v: f64| (0.0..=1.0).contains(&v);
        let ok = in_unit(self.clean_accuracy) && self.mvp_accuracy.is_none_or(in_unit) && self.pcr.is_none_or(in_unit);
        if !ok {
            return Err(Error::InvalidArgument("metrics values must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Mean and sample standard deviation (0 for a single value).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Some(Self { mean, std })
    }
}

/// One `(method, target)` cell of the report table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: Method,
    pub target_domain: String,
    pub runs: usize,
    pub seeds: Vec<u64>,
    pub clean_accuracy: MeanStd,
    pub mvp_accuracy: Option<MeanStd>,
    pub pcr: Option<MeanStd>,
}

/// Groups records by `(method, target domain)` in sorted order. Optional
/// metrics are aggregated over the runs that report them.
pub fn aggregate_metrics(records: &[MetricsRecord]) -> Result<Vec<ReportRow>> {
    if records.is_empty() {
        return Err(Error::Empty("no metrics records to aggregate".into()));
    }
    let mut groups: BTreeMap<(String, String), Vec<&MetricsRecord>> = BTreeMap::new();
    for r in records {
        r.validate()?;
        groups
            .entry((r.method.to_string(), r.target_domain.clone()))
            .or_default()
            .push(r);
    }
    Ok(groups
        .into_values()
        .map(|rs| {
            let pick =
                |f: &dyn Fn(&MetricsRecord) -> Option<f64>| -> Vec<f64> { rs.iter().filter_map(|r| f(r)).collect() };
            ReportRow {
                method: rs[0].method,
                target_domain: rs[0].target_domain.clone(),
                runs: rs.len(),
                seeds: rs.iter().map(|r| r.seed).collect(),
                clean_accuracy: MeanStd::of(&pick(&|r| Some(r.clean_accuracy))).expect("group is non-empty"),
                mvp_accuracy: MeanStd::of(&pick(&|r| r.mvp_accuracy)),
                pcr: MeanStd::of(&pick(&|r| r.pcr)),
            }
        })
        .collect())
}

/// Writes the report table: a version comment line, then one row per
/// `(method, target)` with mean and std columns. Absent metrics are empty.
pub fn write_report_csv<W: std::io::Write>(rows: &[ReportRow], mut writer: W) -> Result<()> {
    write_csv_version(&mut writer)?;
    let mut w = csv::Writer::from_writer(writer);
    let csv_err = |e: csv::Error| Error::Parse {
        line: 0,
        message: e.to_string(),
    };
    w.write_record([
        "method",
        "target_domain",
        "runs",
        "clean_accuracy_mean",
        "clean_accuracy_std",
        "mvp_accuracy_mean",
        "mvp_accuracy_std",
        "pcr_mean",
        "pcr_std",
    ])
    .map_err(csv_err)?;
    let cell = |m: Option<MeanStd>| match m {
        Some(m) => [m.mean.to_string(), m.std.to_string()],
        None => [String::new(), String::new()],
    };
    for r in rows {
        let [ca, cs] = cell(Some(r.clean_accuracy));
        let [ma, ms] = cell(r.mvp_accuracy);
        let [pa, ps] = cell(r.pcr);
        w.write_record([
            r.method.to_string(),
            r.target_domain.clone(),
            r.runs.to_string(),
            ca,
            cs,
            ma,
            ms,
            pa,
            ps,
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io("report output", e))?;
    Ok(())
}
