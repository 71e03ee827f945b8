//! Station-disjoint splits, the training loop, evaluation metrics and the
//! α/β/γ experiment grid.

mod grid;
mod metrics;
mod split;
mod train;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ConvBlock, EncoderConfig, HeadInput, ModelConfig, TargetMode, DEFAULT_CONV_BLOCKS, DEFAULT_HIDDEN};
use crate::nn::OptimizerKind;
use crate::preprocess::{AnnotationSource, WindowSpec};
use crate::site_class::ClassBoundaries;

pub use grid::{
    cell_names, curve_bands, grid_cells, run_grid, write_grid_outputs, CurveBand, GridCell, GridOutcome, GridReport,
};
pub use metrics::{
    fmt_opt, log_ratio_stats, table_rows, ClassRow, ErrorSummary, LogRatioStats, MetricsReport, StationPrediction,
    TABLE_HEADER,
};
pub use split::{split_by_station, Role, SplitPlan};
pub use train::{
    curves_csv, evaluate, evaluate_sequences, initial_params, prepare_sequences, train, train_sequences, EpochStats,
    PreparedSet, TrainOutcome,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TrainingMethod {
    #[default]
    Scratch,
    Transfer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub training_method: TrainingMethod,
    pub ps_info: bool,
    pub annotation_train: AnnotationSource,
    pub annotation_test: AnnotationSource,
    pub window: WindowSpec,
    pub split_seed: u64,
    pub train_fraction: f64,
    /// Share of the training stations held out for best-epoch selection.
    pub val_fraction: f64,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub encoder_checkpoint: Option<PathBuf>,
    pub freeze_encoder: bool,
    pub hidden_size: usize,
    pub conv_blocks: Vec<ConvBlock>,
    pub target: TargetMode,
    pub head_input: HeadInput,
    /// Seeds initialization and minibatch order.
    pub seed: u64,
    pub class_boundaries: ClassBoundaries,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            training_method: TrainingMethod::Scratch,
            ps_info: false,
            annotation_train: AnnotationSource::Auto,
            annotation_test: AnnotationSource::Auto,
            window: WindowSpec::default(),
            split_seed: 0,
            train_fraction: 0.8,
            val_fraction: 0.1,
            epochs: 30,
            lr: 1e-3,
            batch_size: 8,
            optimizer: OptimizerKind::Adam,
            encoder_checkpoint: None,
            freeze_encoder: false,
            hidden_size: DEFAULT_HIDDEN,
            conv_blocks: DEFAULT_CONV_BLOCKS.to_vec(),
            target: TargetMode::Log10,
            head_input: HeadInput::Hidden,
            seed: 0,
            class_boundaries: ClassBoundaries::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.window.validate()?;
        if self.ps_info != self.window.include_ps_channel {
            return Err(Error::Config(format!(
                "ps_info is {} but the window {} the P/S channel",
                self.ps_info,
                if self.window.include_ps_channel { "includes" } else { "omits" }
            )));
        }
        if self.training_method == TrainingMethod::Transfer && self.encoder_checkpoint.is_none() {
            return Err(Error::Config("transfer training needs encoder_checkpoint".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be >= 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Config(format!("train_fraction must be in (0, 1), got {}", self.train_fraction)));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config(format!("val_fraction must be in [0, 1), got {}", self.val_fraction)));
        }
        Ok(())
    }

    /// Window used for sequences built with picks from `source`.
    pub fn window_for(&self, source: AnnotationSource) -> WindowSpec {
        WindowSpec {
            annotation_source: source,
            ..self.window.clone()
        }
    }

    pub fn model_config(&self, sample_rate: f64) -> Result<ModelConfig> {
        let (seg_len, _) = self.window.sample_counts(sample_rate)?;
        let cfg = ModelConfig {
            encoder: EncoderConfig::new(self.window.channels(), self.conv_blocks.clone(), seg_len)?,
            hidden_size: self.hidden_size,
            target: self.target,
            head_input: self.head_input,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}
