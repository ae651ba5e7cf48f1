//! Experiment harness: run configuration, the training loop, split
//! evaluation, model comparison, and the operator-level gradient audit.
//!
//! The harness owns everything above the model itself. It composes the
//! text tower and the segmentation backbone into one trainable bundle,
//! drives AdamW under a cosine schedule, and writes every artifact
//! (checkpoints, logs, reports) in formats the CLI exposes verbatim.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneError, ModelConfig};
use crate::data::DataError;
use crate::metrics::MetricsError;
use crate::tensor::{AdamWParams, CheckpointError, TensorError};
use crate::text::TextError;

mod compare;
mod eval;
mod gradcheck;
mod model;
mod train;

pub use compare::{compare_cases, ComparisonReport, MetricDelta};
pub use eval::{
    evaluate_model, load_per_case, write_evaluation, Evaluation, PER_CASE_FILE, REPORT_CSV,
    REPORT_JSON,
};
pub use gradcheck::{run_gradcheck, COMPOSITE_CHECKS, CUSTOM_OPS, GRADCHECK_TOLERANCE};
pub use model::{Model, CAPTION_SEQ_LEN, TEXT_BLOCKS};
pub use train::{
    train_model, train_run, EpochRecord, FoldSelect, TrainLog, TrainOutcome, BEST_CHECKPOINT_DIR,
    TRAIN_LOG_FILE,
};

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("invalid run config: {0}")]
    Config(String),
    #[error("split `{0}` selects no samples")]
    SplitEmpty(String),
    #[error("case ids do not match: {0}")]
    CaseMismatch(String),
    #[error("non-finite value at epoch {epoch}; last good checkpoint: {}",
            .checkpoint.as_deref().map_or("none".into(), |p| p.display().to_string()))]
    NonFinite {
        epoch: usize,
        checkpoint: Option<PathBuf>,
    },
    #[error("output `{0}` already exists; pass overwrite to replace it")]
    OutputExists(PathBuf),
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error(transparent)]
    Fusion(#[from] crate::fusion::FusionError),
    #[error(transparent)]
    Text(#[from] TextError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl HarnessError {
    /// True when the error chain bottoms out in a non-finite tensor, the
    /// one failure the training loop converts into a checkpointed abort.
    pub fn is_non_finite(&self) -> bool {
        use crate::fusion::FusionError;
        matches!(
            self,
            HarnessError::Tensor(TensorError::NonFinite(_))
                | HarnessError::Backbone(BackboneError::Tensor(TensorError::NonFinite(_)))
                | HarnessError::Backbone(BackboneError::Fusion(FusionError::Tensor(
                    TensorError::NonFinite(_)
                )))
                | HarnessError::Fusion(FusionError::Tensor(TensorError::NonFinite(_)))
                | HarnessError::Metrics(MetricsError::Tensor(TensorError::NonFinite(_)))
                | HarnessError::Text(TextError::Tensor(TensorError::NonFinite(_)))
                | HarnessError::NonFinite { .. }
        )
    }
}

pub type Result<V, E = HarnessError> = std::result::Result<V, E>;

/// Everything one training run needs, serializable so a run is fully
/// described by one JSON file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamWParams,
    /// Cosine floor; the peak is `optimizer.lr`.
    pub lr_min: f64,
    pub seed: u64,
    /// Directory holding a generated dataset.
    pub dataset: PathBuf,
    /// Directory receiving checkpoints and the training log.
    pub out: PathBuf,
}

impl RunConfig {
    /// Desk-scale defaults: 50 epochs of batch 8 under the stock AdamW
    /// hyperparameters, decaying to one percent of the peak rate.
    pub fn desk(dataset: impl Into<PathBuf>, out: impl Into<PathBuf>) -> Self {
        let optimizer = AdamWParams::default();
        let lr_min = optimizer.lr * 0.01;
        RunConfig {
            model: ModelConfig::desk(),
            epochs: 50,
            batch_size: 8,
            optimizer,
            lr_min,
            seed: 17,
            dataset: dataset.into(),
            out: out.into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.epochs == 0 {
            return Err(HarnessError::Config("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(HarnessError::Config("batch_size must be >= 1".into()));
        }
        let lr_positive = self.optimizer.lr.is_finite() && self.optimizer.lr > 0.0;
        if !lr_positive {
            return Err(HarnessError::Config(
                "learning rate must be positive".into(),
            ));
        }
        let floor_in_range = self.lr_min >= 0.0 && self.lr_min <= self.optimizer.lr;
        if !floor_in_range {
            return Err(HarnessError::Config(
                "lr_min must sit in [0, optimizer.lr]".into(),
            ));
        }
        Ok(())
    }
}

/// Creates `dir`, refusing to reuse a non-empty one unless `overwrite`
/// is set. Existing contents are left in place; files are replaced
/// individually by whatever the caller writes.
pub fn prepare_out_dir(dir: &Path, overwrite: bool) -> Result<()> {
    if dir.exists() {
        let occupied = std::fs::read_dir(dir)?.next().is_some();
        if occupied && !overwrite {
            return Err(HarnessError::OutputExists(dir.to_path_buf()));
        }
    }
    std::fs::create_dir_all(dir)?;
    Ok(())
}
