use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::analysis::{BnPolicy, SharpnessConfig};
use crate::domains::{
    default_class_cov_diag, default_class_means, generate_synthetic_suite, load_csv_suite, rotated_suite_specs,
    DomainSpec, DomainSuite,
};
use crate::meta::{MetaConfig, Method};
use crate::mvp::MvpConfig;
use crate::{Error, Result};

pub const CONFIG_FORMAT_VERSION: u32 = 1;

/// Where the domains come from. Exactly one source per experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum SuiteSource {
    /// The rotated benchmark: one 2-D domain per angle with shared class
    /// geometry. `data_seed` defaults to the experiment seed.
    Rotated {
        angles_deg: Vec<f64>,
        samples_per_class: usize,
        #[serde(default = "default_class_means")]
        class_means: Vec<Vec<f64>>,
        #[serde(default = "default_class_cov_diag")]
        class_cov_diag: Vec<Vec<f64>>,
        #[serde(default)]
        data_seed: Option<u64>,
    },
    /// Explicit generative specs.
    Specs(Vec<DomainSpec>),
    /// A CSV suite on disk.
    Csv(PathBuf),
}

impl Default for SuiteSource {
    fn default() -> Self {
        SuiteSource::Rotated {
            angles_deg: vec![0.0, 15.0, 30.0, 45.0],
            samples_per_class: 500,
            class_means: default_class_means(),
            class_cov_diag: default_class_cov_diag(),
            data_seed: None,
        }
    }
}

impl SuiteSource {
    /// Number of domains, when known without touching the disk.
    pub fn num_domains(&self) -> Option<usize> {
        match self {
            SuiteSource::Rotated { angles_deg, .. } => Some(angles_deg.len()),
            SuiteSource::Specs(specs) => Some(specs.len()),
            SuiteSource::Csv(_) => None,
        }
    }

    pub fn load(&self, seed: u64) -> Result<DomainSuite> {
        match self {
            SuiteSource::Rotated {
                angles_deg,
                samples_per_class,
                class_means,
                class_cov_diag,
                data_seed,
            } => {
                let mut specs = rotated_suite_specs(angles_deg, *samples_per_class, data_seed.unwrap_or(seed));
                for s in &mut specs {
                    s.class_means = class_means.clone();
                    s.class_cov_diag = class_cov_diag.clone();
                }
                generate_synthetic_suite(&specs)
            }
            SuiteSource::Specs(specs) => generate_synthetic_suite(specs),
            SuiteSource::Csv(path) => load_csv_suite(path),
        }
    }
}

/// Stability constants and confidence of the generalization bound; the
/// risk and divergence terms are estimated from data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoundSettings {
    pub beta1: f64,
    pub beta2: f64,
    /// Defaults to the number of trajectories drawn during training.
    pub n_sequences: Option<u64>,
    pub delta: f64,
    pub loss_bound_m: f64,
    pub knn_fallback: bool,
    pub knn_k: usize,
}

impl Default for BoundSettings {
    fn default() -> Self {
        Self {
            beta1: 0.0,
            beta2: 0.0,
            n_sequences: None,
            delta: 0.05,
            loss_bound_m: 1.0,
            knn_fallback: true,
            knn_k: 5,
        }
    }
}

/// Analyses run by `train` after fitting, and their settings (also used by
/// the stand-alone analysis subcommands).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    pub sharpness: bool,
    pub surface: bool,
    pub bound: bool,
    pub sharpness_config: SharpnessConfig,
    pub surface_resolution: usize,
    pub surface_bn_policy: BnPolicy,
    pub bound_settings: BoundSettings,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            sharpness: false,
            surface: false,
            bound: false,
            sharpness_config: SharpnessConfig::default(),
            surface_resolution: 21,
            surface_bn_policy: BnPolicy::Interpolate,
            bound_settings: BoundSettings::default(),
        }
    }
}

/// One experiment. The top-level `seed` overrides the seeds nested in
/// `meta`, `mvp` and `analysis.sharpness_config`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub format_version: u32,
    pub suite: SuiteSource,
    pub target_index: usize,
    pub method: Method,
    pub meta: MetaConfig,
    pub mvp: MvpConfig,
    /// Transformed copies per sample when measuring prediction change rate.
    pub pcr_trials: usize,
    pub analysis: AnalysisConfig,
    pub seed: u64,
    /// Wall time breaks bitwise reproducibility of artifacts, so it is
    /// recorded only on request.
    pub record_wall_time: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            format_version: CONFIG_FORMAT_VERSION,
            suite: SuiteSource::default(),
            target_index: 0,
            method: Method::Mvrml,
            meta: MetaConfig::default(),
            mvp: MvpConfig::default(),
            pcr_trials: 10,
            analysis: AnalysisConfig::default(),
            seed: 0,
            record_wall_time: false,
        }
    }
}

fn key_error(key: &str, e: Error) -> Error {
    match e {
        Error::Config { key: inner, message } => Error::Config {
            key: format!("{key}.{inner}"),
            message,
        },
        other => Error::Config {
            key: key.into(),
            message: other.to_string(),
        },
    }
}

impl ExperimentConfig {
    /// Parses JSON text; errors carry the path of the offending key.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::Config {
                key: if path == "." { "<root>".into() } else { path },
                message: e.into_inner().to_string(),
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.format_version != CONFIG_FORMAT_VERSION {
            return Err(Error::Config {
                key: "format_version".into(),
                message: format!(
                    "unsupported version {} (expected {CONFIG_FORMAT_VERSION})",
                    self.format_version
                ),
            });
        }
        if let Some(n) = self.suite.num_domains() {
            if n < 2 {
                return Err(Error::Config {
                    key: "suite".into(),
                    message: "leave-one-domain-out needs at least two domains".into(),
                });
            }
            if self.target_index >= n {
                return Err(Error::Config {
                    key: "target_index".into(),
                    message: format!("index {} but the suite has {n} domains", self.target_index),
                });
            }
        }
        self.meta.validate().map_err(|e| key_error("meta", e))?;
        if self.mvp.num_views_m == 0 {
            return Err(Error::Config {
                key: "mvp.num_views_m".into(),
                message: "must be at least 1".into(),
            });
        }
        if self.pcr_trials == 0 {
            return Err(Error::Config {
                key: "pcr_trials".into(),
                message: "must be at least 1".into(),
            });
        }
        self.analysis
            .sharpness_config
            .validate()
            .map_err(|e| key_error("analysis.sharpness_config", e))?;
        if self.analysis.surface_resolution == 0 {
            return Err(Error::Config {
                key: "analysis.surface_resolution".into(),
                message: "must be at least 1".into(),
            });
        }
        Ok(())
    }

    /// Copies the top-level seed into every nested seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.meta.seed = seed;
        self.mvp.seed = seed;
        self.analysis.sharpness_config.seed = seed;
        self
    }
}

/// Reads, parses and validates a config file. Missing keys take their
/// documented defaults, so `{}` is a complete config.
pub fn load_config(path: impl AsRef<Path>) -> Result<ExperimentConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    ExperimentConfig::from_json(&text)
}
