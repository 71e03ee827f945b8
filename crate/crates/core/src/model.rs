//! CNN encoder applied to every segment, one LSTM unrolled over the
//! segments, and a linear head on the final state.
//!
//! ```text
//! seg_1 ─ CNN ─┐      seg_2 ─ CNN ─┐            seg_T ─ CNN ─┐
//!        0 ─ LSTM ─ (h,c) ─ LSTM ─ (h,c) ─ … ─ LSTM ─ h_T ─ FC ─ y
//! ```
//!
//! The same encoder and LSTM tensors serve every step.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{load_tensors, save_tensors, Graph, LstmState, NamedTensor, Tensor, Var};
use crate::preprocess::{SegmentSequence, WindowSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvBlock {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    /// Non-overlapping max-pool width; 1 disables pooling.
    pub pool_width: usize,
}

impl ConvBlock {
    pub const fn new(out_channels: usize, kernel: usize, stride: usize, pool_width: usize) -> Self {
        Self {
            out_channels,
            kernel,
            stride,
            pool_width,
        }
    }
}

pub const DEFAULT_CONV_BLOCKS: [ConvBlock; 3] = [
    ConvBlock::new(16, 7, 1, 2),
    ConvBlock::new(32, 5, 1, 2),
    ConvBlock::new(64, 3, 1, 2),
];

pub const DEFAULT_HIDDEN: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub in_channels: usize,
    pub conv_blocks: Vec<ConvBlock>,
    /// Samples per segment.
    pub segment_len: usize,
    /// Flattened encoder output per segment.
    pub feature_dim: usize,
}

impl EncoderConfig {
    /// Builds a config with `feature_dim` computed from the blocks.
    pub fn new(in_channels: usize, conv_blocks: Vec<ConvBlock>, segment_len: usize) -> Result<Self> {
        let mut cfg = Self {
            in_channels,
            conv_blocks,
            segment_len,
            feature_dim: 0,
        };
        cfg.feature_dim = cfg.computed_feature_dim()?;
        Ok(cfg)
    }

    pub fn standard(in_channels: usize, segment_len: usize) -> Result<Self> {
        Self::new(in_channels, DEFAULT_CONV_BLOCKS.to_vec(), segment_len)
    }

    pub fn computed_feature_dim(&self) -> Result<usize> {
        let mut len = self.segment_len;
        let mut channels = self.in_channels;
        for (i, b) in self.conv_blocks.iter().enumerate() {
            if b.out_channels == 0 || b.kernel == 0 || b.stride == 0 || b.pool_width == 0 {
                return Err(Error::Config(format!("conv block {i}: all sizes must be >= 1")));
            }
            if len < b.kernel {
                return Err(Error::Config(format!(
                    "conv block {i}: input length {len} shorter than kernel {}",
                    b.kernel
                )));
            }
            len = (len - b.kernel) / b.stride + 1;
            if len < b.pool_width {
                return Err(Error::Config(format!(
                    "conv block {i}: length {len} shorter than pool width {}",
                    b.pool_width
                )));
            }
            len /= b.pool_width;
            channels = b.out_channels;
        }
        Ok(channels * len)
    }

    pub fn validate(&self) -> Result<()> {
        if !(3..=4).contains(&self.in_channels) {
            return Err(Error::Config(format!("in_channels must be 3 or 4, got {}", self.in_channels)));
        }
        let computed = self.computed_feature_dim()?;
        if computed != self.feature_dim {
            return Err(Error::Config(format!(
                "feature_dim {} does not match the {computed} implied by the conv blocks",
                self.feature_dim
            )));
        }
        Ok(())
    }
}

/// What the network regresses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetMode {
    /// log10 of Vs30 in m/s.
    #[default]
    Log10,
    /// Vs30 in km/s.
    Linear,
}

impl TargetMode {
    pub fn encode(self, vs30: f64) -> f64 {
        match self {
            TargetMode::Log10 => vs30.log10(),
            TargetMode::Linear => vs30 / 1000.0,
        }
    }

    /// Network output to m/s; always positive.
    pub fn decode(self, y: f64) -> f64 {
        match self {
            TargetMode::Log10 => 10f64.powf(y),
            // a linear head can go negative; clamp to 1 mm/s
            TargetMode::Linear => 1000.0 * y.max(1e-6),
        }
    }
}

/// Which final LSTM state the head reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadInput {
    #[default]
    Hidden,
    HiddenAndCell,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub hidden_size: usize,
    #[serde(default)]
    pub target: TargetMode,
    #[serde(default)]
    pub head_input: HeadInput,
}

impl ModelConfig {
    /// Default architecture for sequences produced by `window` at `sample_rate`.
    pub fn for_window(window: &WindowSpec, sample_rate: f64) -> Result<Self> {
        let (seg_len, _) = window.sample_counts(sample_rate)?;
        Ok(Self {
            encoder: EncoderConfig::standard(window.channels(), seg_len)?,
            hidden_size: DEFAULT_HIDDEN,
            target: TargetMode::Log10,
            head_input: HeadInput::Hidden,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.hidden_size == 0 {
            return Err(Error::Config("hidden_size must be >= 1".into()));
        }
        Ok(())
    }

    fn head_width(&self) -> usize {
        match self.head_input {
            HeadInput::Hidden => self.hidden_size,
            HeadInput::HiddenAndCell => 2 * self.hidden_size,
        }
    }

    /// Names and shapes of every parameter tensor, in storage order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut c_in = self.encoder.in_channels;
        for (i, b) in self.encoder.conv_blocks.iter().enumerate() {
            out.push((format!("encoder.conv{i}.weight"), vec![b.out_channels, c_in, b.kernel]));
            out.push((format!("encoder.conv{i}.bias"), vec![b.out_channels]));
            c_in = b.out_channels;
        }
        let h = self.hidden_size;
        out.push(("lstm.w_ih".into(), vec![4 * h, self.encoder.feature_dim]));
        out.push(("lstm.w_hh".into(), vec![4 * h, h]));
        out.push(("lstm.b".into(), vec![4 * h]));
        out.push(("head.w".into(), vec![1, self.head_width()]));
        out.push(("head.b".into(), vec![1]));
        out
    }

    fn encoder_tensor_count(&self) -> usize {
        2 * self.encoder.conv_blocks.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

/// Graph handles for one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    pub output: Var,
    pub state: LstmState,
}

impl ModelParams {
    /// Seeded uniform(±√(1/fan_in)) initialization, forget-gate bias +1.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = config.hidden_size;
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (name, shape) in config.layout() {
            let fan_in = match name.as_str() {
                "lstm.w_ih" => config.encoder.feature_dim,
                "lstm.w_hh" | "lstm.b" => h,
                "head.w" | "head.b" => config.head_width(),
                _ if name.ends_with(".weight") => shape[1] * shape[2],
                _ => {
                    // conv bias shares its weight's fan-in
                    let w = tensors.last().map(|t: &Tensor| t.shape()[1] * t.shape()[2]);
                    w.unwrap_or(1)
                }
            };
            let bound = (1.0 / fan_in as f64).sqrt();
            let n: usize = shape.iter().product();
            let mut values: Vec<f64> = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
            if name == "lstm.b" {
                values[h..2 * h].iter_mut().for_each(|v| *v = 1.0);
            }
            names.push(name);
            tensors.push(Tensor::new(shape, values)?.with_requires_grad(true));
        }
        Ok(Self {
            config: config.clone(),
            names,
            tensors,
        })
    }

    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let (names, tensors) = config
            .layout()
            .into_iter()
            .map(|(n, s)| (n, Tensor::zeros(&s).with_requires_grad(true)))
            .unzip();
        Ok(Self {
            config: config.clone(),
            names,
            tensors,
        })
    }

    /// Rebuilds params from named tensors; names and shapes must match the
    /// config's layout exactly.
    pub fn from_named(config: &ModelConfig, named: Vec<NamedTensor>) -> Result<Self> {
        config.validate()?;
        let layout = config.layout();
        if named.len() != layout.len() {
            return Err(Error::TensorMismatch {
                name: "<all>".into(),
                message: format!("expected {} tensors, found {}", layout.len(), named.len()),
            });
        }
        let mut tensors = Vec::with_capacity(named.len());
        for ((name, shape), nt) in layout.iter().zip(named) {
            check_tensor(name, shape, &nt)?;
            tensors.push(nt.tensor.with_requires_grad(true));
        }
        Ok(Self {
            config: config.clone(),
            names: layout.into_iter().map(|(n, _)| n).collect(),
            tensors,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &mut self.tensors[i])
    }

    pub fn named(&self) -> Vec<NamedTensor> {
        self.names
            .iter()
            .zip(&self.tensors)
            .map(|(n, t)| NamedTensor {
                name: n.clone(),
                tensor: t.clone(),
            })
            .collect()
    }

    pub fn encoder_named(&self) -> Vec<NamedTensor> {
        let mut all = self.named();
        all.truncate(self.config.encoder_tensor_count());
        all
    }

    pub fn set_encoder_frozen(&mut self, frozen: bool) {
        let k = self.config.encoder_tensor_count();
        self.tensors[..k].iter_mut().for_each(|t| t.set_requires_grad(!frozen));
    }

    pub fn encoder_frozen(&self) -> bool {
        let k = self.config.encoder_tensor_count();
        k > 0 && self.tensors[..k].iter().all(|t| !t.requires_grad())
    }

    pub fn set_head_bias(&mut self, value: f64) {
        let b = self.tensors.last_mut().expect("head.b is always present");
        b.values_mut()[0] = value;
    }

    /// Records every parameter as a graph leaf, respecting frozen flags.
    pub fn bind(&self, g: &mut Graph) -> Vec<Var> {
        self.tensors.iter().map(|t| g.leaf(t)).collect()
    }

    /// Builds the forward pass for `seq` using `vars` from [`Self::bind`]
    /// (or any same-shaped handles, e.g. from a gradient check).
    pub fn forward_graph(&self, g: &mut Graph, vars: &[Var], seq: &SegmentSequence) -> Result<ForwardVars> {
        forward_graph(&self.config, g, vars, seq)
    }

    /// Raw network output (log10 m/s in the default target mode).
    pub fn forward(&self, seq: &SegmentSequence) -> Result<f64> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g);
        let fv = self.forward_graph(&mut g, &vars, seq)?;
        Ok(g.scalar(fv.output))
    }

    pub fn final_hidden(&self, seq: &SegmentSequence) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g);
        let fv = self.forward_graph(&mut g, &vars, seq)?;
        Ok(g.value(fv.state.hidden).to_vec())
    }

    pub fn predict_vs30(&self, seq: &SegmentSequence) -> Result<f64> {
        Ok(self.config.target.decode(self.forward(seq)?))
    }

    pub fn save_encoder(&self, path: &Path) -> Result<()> {
        save_tensors(path, &self.encoder_named())
    }

    /// Fresh params for this config (seeded) whose encoder is copied from
    /// `encoder_file`. The file may hold just the encoder or a full
    /// checkpoint; every `encoder.*` tensor must match by name and shape.
    pub fn transfer_load(&self, encoder_file: &Path, freeze_encoder: bool, seed: u64) -> Result<Self> {
        let loaded = load_tensors(encoder_file)?;
        let mut fresh = Self::init(&self.config, seed)?;
        let k = self.config.encoder_tensor_count();
        let layout = self.config.layout();
        for (i, (name, shape)) in layout[..k].iter().enumerate() {
            let Some(nt) = loaded.iter().find(|nt| &nt.name == name) else {
                return Err(Error::TensorMismatch {
                    name: name.clone(),
                    message: format!("missing from {}", encoder_file.display()),
                });
            };
            check_tensor(name, shape, nt)?;
            fresh.tensors[i] = nt.tensor.clone().with_requires_grad(true);
        }
        fresh.set_encoder_frozen(freeze_encoder);
        Ok(fresh)
    }
}

fn check_tensor(name: &str, shape: &[usize], nt: &NamedTensor) -> Result<()> {
    if nt.name != name {
        return Err(Error::TensorMismatch {
            name: nt.name.clone(),
            message: format!("expected tensor {name}"),
        });
    }
    if nt.tensor.shape() != shape {
        return Err(Error::TensorMismatch {
            name: name.into(),
            message: format!("shape {:?}, expected {shape:?}", nt.tensor.shape()),
        });
    }
    Ok(())
}

fn forward_graph(config: &ModelConfig, g: &mut Graph, vars: &[Var], seq: &SegmentSequence) -> Result<ForwardVars> {
    let enc = &config.encoder;
    if vars.len() != config.layout().len() {
        return Err(Error::shape("forward", format!("{} parameter handles", vars.len())));
    }
    if seq.channels != enc.in_channels || seq.segment_len != enc.segment_len {
        return Err(Error::shape(
            "forward",
            format!(
                "sequence {}: segments are [{} x {}], model expects [{} x {}]",
                seq.record_id, seq.channels, seq.segment_len, enc.in_channels, enc.segment_len
            ),
        ));
    }
    let t_len = seq.num_segments();
    if t_len == 0 {
        return Err(Error::shape("forward", format!("sequence {} has no segments", seq.record_id)));
    }
    // all segments go through the encoder as one batch
    let mut x = g.constant(vec![t_len, seq.channels, seq.segment_len], seq.stacked())?;
    for (i, b) in enc.conv_blocks.iter().enumerate() {
        x = g.conv1d(x, vars[2 * i], vars[2 * i + 1], b.stride, 0)?;
        x = g.relu(x);
        if b.pool_width > 1 {
            x = g.max_pool1d(x, b.pool_width, b.pool_width)?;
        }
    }
    let features = g.reshape(x, vec![t_len, enc.feature_dim])?;
    let k = config.encoder_tensor_count();
    let (w_ih, w_hh, bias, head_w, head_b) = (vars[k], vars[k + 1], vars[k + 2], vars[k + 3], vars[k + 4]);
    let gates = g.linear(features, w_ih, Some(bias))?;
    let h = config.hidden_size;
    let mut state = LstmState {
        hidden: g.constant(vec![h], vec![0.0; h])?,
        cell: g.constant(vec![h], vec![0.0; h])?,
    };
    for t in 0..t_len {
        let gx = g.select_row(gates, t)?;
        state = g.lstm_recurrent(gx, state, w_hh)?;
    }
    let head_in = match config.head_input {
        HeadInput::Hidden => state.hidden,
        HeadInput::HiddenAndCell => g.concat(&[state.hidden, state.cell]),
    };
    let output = g.linear(head_in, head_w, Some(head_b))?;
    Ok(ForwardVars { output, state })
}

/// JSON stored next to a checkpoint's weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub window: WindowSpec,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub window: WindowSpec,
}

/// `c.bin` → `c.bin.json`.
pub fn sidecar_path(weights: &Path) -> PathBuf {
    let mut s = weights.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn save_checkpoint(path: &Path, params: &ModelParams, window: &WindowSpec) -> Result<()> {
    save_tensors(path, &params.named())?;
    crate::fsutil::write_json(
        &sidecar_path(path),
        &CheckpointMeta {
            model: params.config().clone(),
            window: window.clone(),
        },
    )
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let side = sidecar_path(path);
    let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let meta: CheckpointMeta = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: side.clone(),
        line: e.line(),
        message: e.to_string(),
    })?;
    let params = ModelParams::from_named(&meta.model, load_tensors(path)?).map_err(|e| Error::Checkpoint {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    Ok(Checkpoint {
        params,
        window: meta.window,
    })
}

impl Checkpoint {
    /// Refuses preprocessing that differs from what the model was trained
    /// on. The annotation source may differ (train on auto, test on manual).
    pub fn check_window(&self, path: &Path, window: &WindowSpec) -> Result<()> {
        let same = WindowSpec {
            annotation_source: self.window.annotation_source,
            ..window.clone()
        } == self.window;
        if same {
            return Ok(());
        }
        let side = sidecar_path(path);
        let message = if self.window.channels() != window.channels() {
            format!(
                "{} records a {}-channel model, the configuration asks for {} channels",
                side.display(),
                self.window.channels(),
                window.channels()
            )
        } else {
            format!("{} records window {:?}, the configuration asks for {window:?}", side.display(), self.window)
        };
        Err(Error::Checkpoint {
            path: path.to_path_buf(),
            message,
        })
    }
}
