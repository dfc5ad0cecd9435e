//! JSON checkpoints: architecture, flat parameters and per-layer batch-norm
//! running statistics. Floats are written in shortest round-trip form, so a
//! save/load cycle is exact.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EpochRecord, Method};
use crate::nn::{ArchSpec, ModelState};
use crate::{Error, Result};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub method: Method,
    pub seed: u64,
    pub target_index: usize,
    pub target_domain: String,
    pub best_epoch: Option<usize>,
    #[serde(default)]
    pub history: Vec<EpochRecord>,
    /// Training time, present only when requested (it varies run to run).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_time_secs: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub arch: ArchSpec,
    pub bn_momentum: f64,
    /// Flat learnable parameters in the layout documented on [`crate::nn`].
    pub params: Vec<f64>,
    pub bn_running_mean: Vec<Vec<f64>>,
    pub bn_running_var: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta: Option<CheckpointMeta>,
}

impl Checkpoint {
    pub fn from_model(model: &ModelState, meta: Option<CheckpointMeta>) -> Self {
        Self {
            format_version: CHECKPOINT_FORMAT_VERSION,
            arch: model.arch().clone(),
            bn_momentum: model.bn_momentum(),
            params: model.params(),
            bn_running_mean: model.batchnorms().map(|b| b.running_mean.to_vec()).collect(),
            bn_running_var: model.batchnorms().map(|b| b.running_var.to_vec()).collect(),
            meta,
        }
    }

    pub fn to_model(&self) -> Result<ModelState> {
        if self.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Unsupported(format!(
                "checkpoint format_version {} (this build reads {CHECKPOINT_FORMAT_VERSION})",
                self.format_version
            )));
        }
        let mut running: Vec<f64> = self.bn_running_mean.iter().flatten().copied().collect();
        running.extend(self.bn_running_var.iter().flatten());
        let model = ModelState::from_flat(self.arch.clone(), self.bn_momentum, &self.params, &running)?;
        let widths: Vec<usize> = model.batchnorms().map(|b| b.gamma.len()).collect();
        let mean_widths: Vec<usize> = self.bn_running_mean.iter().map(Vec::len).collect();
        let var_widths: Vec<usize> = self.bn_running_var.iter().map(Vec::len).collect();
        if widths != mean_widths || widths != var_widths {
            return Err(Error::Structure(
                "batch-norm statistics do not match the architecture".into(),
            ));
        }
        Ok(model)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}
