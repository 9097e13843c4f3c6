//! Three-stage training: encoder pretext training, detector pretraining and
//! detector finetuning at an enlarged image size, with EMA weights,
//! layer-wise learning-rate decay and checkpoints chaining the stages.

mod checkpoint;
mod config;
mod ema;
mod metrics;
mod optim;
mod train;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, load_params, save_checkpoint, Checkpoint, LoadReport, CHECKPOINT_VERSION};
pub use config::{
    apply_override, DataSettings, ModelSection, PipelineSettings, RunConfig, StageConfig, StageId, StageSettings, Stages,
};
pub use ema::{ema_update, EmaState};
pub use metrics::MetricsLog;
pub use optim::{build_optimizer_groups, clip_grad_norm, param_group, AdamW, OptimizerGroup, Schedule, HEAD_PREFIXES};
pub use train::{
    build_detector, build_stage_model, detector_from_checkpoint, evaluate_pair, initialize_from, patch_labels, run_stage,
    train_stage, Augmented, EvalPair, PretextModel, StageModel, StageOutcome, TrainData, PRETEXT,
};

use crate::error::{Error, Result};

/// Record of how a command was invoked, written before it does any work.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub deterministic: bool,
    pub config_hash: String,
    /// Total matching queries per image during training.
    pub training_queries: usize,
    pub config: RunConfig,
    /// Output files by role.
    pub outputs: std::collections::BTreeMap<String, String>,
}

impl RunManifest {
    pub fn new(command: &str, config: &RunConfig) -> Result<Self> {
        Ok(Self {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed: config.pipeline.seed,
            deterministic: config.pipeline.deterministic,
            config_hash: config.hash()?,
            training_queries: config.model_config().queries.total(),
            config: config.clone(),
            outputs: Default::default(),
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}
