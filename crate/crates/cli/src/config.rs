use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use vs30_core::experiment::{ExperimentConfig, TrainingMethod};
use vs30_core::model::{ConvBlock, HeadInput, TargetMode, DEFAULT_CONV_BLOCKS, DEFAULT_HIDDEN};
use vs30_core::nn::OptimizerKind;
use vs30_core::picker::StaLtaParams;
use vs30_core::preprocess::{Anchor, AnnotationSource, WindowSpec};
use vs30_core::signal_store::SynthConfig;
use vs30_core::site_class::ClassBoundaries;

/// Every setting of every subcommand, in one flat namespace. A config file
/// may set any subset; the rest keep their defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Manifest to load. Without one, a synthetic dataset is generated in
    /// memory from the `synth` settings below.
    pub dataset: Option<PathBuf>,
    /// Manual picks CSV replacing the dataset's own manual annotations.
    pub picks_file: Option<PathBuf>,
    /// Seeds synthesis, initialization, minibatch order and clustering.
    pub seed: u64,

    pub stations: usize,
    pub records_per_station: usize,
    pub record_duration_s: f64,
    pub sample_rate: f64,
    /// Store samples inside the manifest instead of binary files.
    pub inline_samples: bool,

    pub pick_method: AnnotationSource,
    pub sta_s: f64,
    pub lta_s: f64,
    pub trigger_ratio: f64,

    pub anchor: Anchor,
    pub duration_s: f64,
    pub segment_len_s: f64,
    pub include_ps_channel: bool,

    pub training_method: TrainingMethod,
    pub annotation_train: AnnotationSource,
    pub annotation_test: AnnotationSource,
    pub split_seed: u64,
    pub train_fraction: f64,
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
    pub class_boundaries: ClassBoundaries,
    /// Seeds per grid cell.
    pub repeats: usize,

    pub checkpoint: Option<PathBuf>,

    pub metrics: Option<PathBuf>,
    pub k_min: usize,
    pub k_max: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let synth = SynthConfig::default();
        let exp = ExperimentConfig::default();
        let sta = StaLtaParams::default();
        Self {
            dataset: None,
            picks_file: None,
            seed: synth.seed,
            stations: synth.n_stations,
            records_per_station: synth.records_per_station,
            record_duration_s: synth.duration_s,
            sample_rate: synth.sample_rate,
            inline_samples: false,
            pick_method: AnnotationSource::Auto,
            sta_s: sta.sta_s,
            lta_s: sta.lta_s,
            trigger_ratio: sta.trigger_ratio,
            anchor: exp.window.anchor,
            duration_s: exp.window.duration_s,
            segment_len_s: exp.window.segment_len_s,
            include_ps_channel: exp.window.include_ps_channel,
            training_method: exp.training_method,
            annotation_train: exp.annotation_train,
            annotation_test: exp.annotation_test,
            split_seed: exp.split_seed,
            train_fraction: exp.train_fraction,
            val_fraction: exp.val_fraction,
            epochs: exp.epochs,
            lr: exp.lr,
            batch_size: exp.batch_size,
            optimizer: exp.optimizer,
            encoder_checkpoint: None,
            freeze_encoder: false,
            hidden_size: DEFAULT_HIDDEN,
            conv_blocks: DEFAULT_CONV_BLOCKS.to_vec(),
            target: exp.target,
            head_input: exp.head_input,
            class_boundaries: exp.class_boundaries,
            repeats: 1,
            checkpoint: None,
            metrics: None,
            k_min: 1,
            k_max: 10,
        }
    }
}

impl RunConfig {
    /// Reads `path` (a config, or a `run_meta.json` whose `config` is used)
    /// and applies `overrides` on top. Overrides win.
    pub fn resolve(path: Option<&Path>, overrides: &[(String, Value)]) -> anyhow::Result<Self> {
        let mut obj = match path {
            None => Map::new(),
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                let v: Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?;
                let v = match v {
                    Value::Object(mut m) if m.contains_key("command") && m.contains_key("config") => {
                        m.remove("config").unwrap()
                    }
                    v => v,
                };
                match v {
                    Value::Object(m) => m,
                    _ => bail!("{}: config must be a JSON object", p.display()),
                }
            }
        };
        for (k, v) in overrides {
            obj.insert(k.clone(), v.clone());
        }
        let cfg: RunConfig = serde_json::from_value(Value::Object(obj)).context("invalid configuration")?;
        Ok(cfg)
    }

    pub fn synth(&self) -> SynthConfig {
        SynthConfig {
            seed: self.seed,
            n_stations: self.stations,
            records_per_station: self.records_per_station,
            duration_s: self.record_duration_s,
            sample_rate: self.sample_rate,
        }
    }

    pub fn sta_lta(&self) -> StaLtaParams {
        StaLtaParams {
            sta_s: self.sta_s,
            lta_s: self.lta_s,
            trigger_ratio: self.trigger_ratio,
        }
    }

    pub fn experiment(&self) -> ExperimentConfig {
        ExperimentConfig {
            training_method: self.training_method,
            ps_info: self.include_ps_channel,
            annotation_train: self.annotation_train,
            annotation_test: self.annotation_test,
            window: WindowSpec {
                anchor: self.anchor,
                duration_s: self.duration_s,
                segment_len_s: self.segment_len_s,
                include_ps_channel: self.include_ps_channel,
                annotation_source: self.annotation_train,
            },
            split_seed: self.split_seed,
            train_fraction: self.train_fraction,
            val_fraction: self.val_fraction,
            epochs: self.epochs,
            lr: self.lr,
            batch_size: self.batch_size,
            optimizer: self.optimizer,
            encoder_checkpoint: self.encoder_checkpoint.clone(),
            freeze_encoder: self.freeze_encoder,
            hidden_size: self.hidden_size,
            conv_blocks: self.conv_blocks.clone(),
            target: self.target,
            head_input: self.head_input,
            seed: self.seed,
            class_boundaries: self.class_boundaries,
        }
    }
}

/// Parses `key=value`. The value is read as JSON when it parses, else as a
/// plain string.
pub fn parse_set(s: &str) -> Result<(String, Value), String> {
    let (k, v) = s.split_once('=').ok_or_else(|| format!("expected key=value, got {s:?}"))?;
    let v = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
    Ok((k.trim().to_string(), v))
}
