use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::archive::{self, Tensor};
use crate::model::{ModelParams, Stage};
use crate::optim::OptimizerState;

const CHECKPOINT_FORMAT: &str = "slicesr-checkpoint/1";

/// Summary of one finished epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub iterations: usize,
    pub lr: f64,
    pub mean_loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_psnr: Option<f64>,
}

/// Everything needed to continue a stage exactly where it stopped.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub optimizer: Option<OptimizerState>,
    /// Epochs completed in the current stage.
    pub epoch: usize,
    /// Epochs the stage was configured for.
    pub target_epochs: usize,
    pub history: Vec<EpochRecord>,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    format: String,
    params: serde_json::Value,
    epoch: usize,
    target_epochs: usize,
    history: Vec<EpochRecord>,
    optimizer: Option<OptimizerMeta>,
}

#[derive(Serialize, Deserialize)]
struct OptimizerMeta {
    name: String,
    step: u64,
    buffers: usize,
}

impl Checkpoint {
    /// Starting point for a stage from bare parameters.
    pub fn fresh(params: ModelParams) -> Self {
        Self {
            params,
            optimizer: None,
            epoch: 0,
            target_epochs: 0,
            history: Vec::new(),
        }
    }

    pub fn stage(&self) -> Option<Stage> {
        self.params.meta.stage
    }

    pub fn is_complete(&self) -> bool {
        self.epoch >= self.target_epochs
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = Meta {
            format: CHECKPOINT_FORMAT.into(),
            params: self.params.archive_meta(),
            epoch: self.epoch,
            target_epochs: self.target_epochs,
            history: self.history.clone(),
            optimizer: self.optimizer.as_ref().map(|o| OptimizerMeta {
                name: o.name.clone(),
                step: o.step,
                buffers: o.buffers.len(),
            }),
        };
        let mut tensors: Vec<Tensor> = self.params.tensors().to_vec();
        if let Some(o) = &self.optimizer {
            tensors.extend(o.buffers.iter().cloned());
        }
        archive::write_archive(path, &serde_json::to_value(meta)?, &tensors)
    }

    /// Reads a checkpoint, or a bare parameter archive as a completed stage.
    pub fn load(path: &Path) -> Result<Self> {
        let (meta, mut tensors) = archive::read_archive(path)?;
        if meta.get("format").and_then(|f| f.as_str()) != Some(CHECKPOINT_FORMAT) {
            return Ok(Self::fresh(ModelParams::from_archive(meta, tensors)?));
        }
        let meta: Meta =
            serde_json::from_value(meta).map_err(|e| Error::format("checkpoint", format!("metadata: {e}")))?;
        let extra = meta.optimizer.as_ref().map_or(0, |o| o.buffers);
        if extra > tensors.len() {
            return Err(Error::format("checkpoint", "missing optimizer buffers"));
        }
        let buffers = tensors.split_off(tensors.len() - extra);
        let params = ModelParams::from_archive(meta.params, tensors)?;
        let optimizer = meta.optimizer.map(|o| OptimizerState {
            name: o.name,
            step: o.step,
            buffers,
        });
        Ok(Self {
            params,
            optimizer,
            epoch: meta.epoch,
            target_epochs: meta.target_epochs,
            history: meta.history,
        })
    }
}
