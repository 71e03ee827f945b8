//! Finite-difference checks of every differentiable op and of the full
//! model, on small randomized shapes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::model::{ConvBlock, EncoderConfig, HeadInput, ModelConfig, ModelParams, TargetMode};
use crate::nn::{grad_check_with, GradCheckOptions, GradCheckReport, GradFault, Graph, LstmState, Tensor, Var};
use crate::preprocess::SegmentSequence;

#[derive(Debug, Clone, Serialize)]
pub struct SuiteEntry {
    pub name: &'static str,
    pub checked: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

impl SuiteEntry {
    fn from_report(name: &'static str, r: &GradCheckReport) -> Self {
        Self {
            name,
            checked: r.checked,
            max_rel_error: r.max_rel_error,
            passed: r.passed,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SuiteReport {
    pub tol: f64,
    pub step: f64,
    pub entries: Vec<SuiteEntry>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.passed)
    }

    /// Fixed-width pass/fail table.
    pub fn table(&self) -> String {
        let mut s = format!("{:<12} {:>8} {:>14}  result\n", "check", "elements", "max rel err");
        for e in &self.entries {
            s.push_str(&format!(
                "{:<12} {:>8} {:>14.3e}  {}\n",
                e.name,
                e.checked,
                e.max_rel_error,
                if e.passed { "PASS" } else { "FAIL" }
            ));
        }
        s
    }
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Values bounded away from zero, so ReLU kinks stay out of the stencil.
fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let v = (0..n)
        .map(|_| {
            let m: f64 = rng.random_range(0.1..1.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), v).unwrap()
}

/// Projects `out` onto fixed random weights, giving a scalar with a
/// generic gradient.
fn project(g: &mut Graph, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = g.value(out).len();
    let shape = g.shape(out).to_vec();
    let w = g.constant(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())?;
    let p = g.mul(out, w)?;
    Ok(g.sum(p))
}

fn toy_model() -> (ModelConfig, SegmentSequence) {
    let config = ModelConfig {
        encoder: EncoderConfig::new(4, vec![ConvBlock::new(3, 3, 1, 2), ConvBlock::new(2, 2, 1, 1)], 12).unwrap(),
        hidden_size: 3,
        target: TargetMode::Log10,
        head_input: HeadInput::Hidden,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let seq = SegmentSequence {
        record_id: "toy".into(),
        station_id: "toy".into(),
        channels: 4,
        segment_len: 12,
        segments: (0..2)
            .map(|_| (0..48).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect(),
        target_vs30: Some(400.0),
        scale: 1.0,
    };
    (config, seq)
}

/// Runs every check. `fault` corrupts one op's backward, for mutation
/// testing of the suite itself.
pub fn run_gradient_suite(fault: Option<GradFault>, seed: u64) -> Result<SuiteReport> {
    let opts = GradCheckOptions {
        fault,
        seed,
        ..GradCheckOptions::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::new();

    let params = [random(&mut rng, &[2, 3, 11]), random(&mut rng, &[4, 3, 3]), random(&mut rng, &[4])];
    let r = grad_check_with(
        |g, v| {
            let y = g.conv1d(v[0], v[1], v[2], 2, 1)?;
            project(g, y, 1)
        },
        &params,
        &opts,
    )?;
    entries.push(SuiteEntry::from_report("conv1d", &r));

    let params = [random(&mut rng, &[2, 3, 10])];
    let r = grad_check_with(
        |g, v| {
            let y = g.max_pool1d(v[0], 3, 2)?;
            project(g, y, 2)
        },
        &params,
        &opts,
    )?;
    entries.push(SuiteEntry::from_report("max_pool1d", &r));

    let params = [off_zero(&mut rng, &[3, 7])];
    let r = grad_check_with(
        |g, v| {
            let y = g.relu(v[0]);
            project(g, y, 3)
        },
        &params,
        &opts,
    )?;
    entries.push(SuiteEntry::from_report("relu", &r));

    let params = [random(&mut rng, &[3, 5]), random(&mut rng, &[4, 5]), random(&mut rng, &[4])];
    let r = grad_check_with(
        |g, v| {
            let y = g.linear(v[0], v[1], Some(v[2]))?;
            project(g, y, 4)
        },
        &params,
        &opts,
    )?;
    entries.push(SuiteEntry::from_report("linear", &r));

    let params = [
        random(&mut rng, &[5]),
        random(&mut rng, &[3]),
        random(&mut rng, &[3]),
        random(&mut rng, &[12, 5]),
        random(&mut rng, &[12, 3]),
        random(&mut rng, &[12]),
    ];
    let r = grad_check_with(
        |g, v| {
            let st = g.lstm_cell(v[0], LstmState { hidden: v[1], cell: v[2] }, v[3], v[4], v[5])?;
            let both = g.concat(&[st.hidden, st.cell]);
            project(g, both, 5)
        },
        &params,
        &opts,
    )?;
    entries.push(SuiteEntry::from_report("lstm_cell", &r));

    let params = [random(&mut rng, &[6]), random(&mut rng, &[6])];
    let r = grad_check_with(|g, v| g.mse_loss(v[0], v[1]), &params, &opts)?;
    entries.push(SuiteEntry::from_report("mse_loss", &r));

    let (config, seq) = toy_model();
    let model = ModelParams::init(&config, seed)?;
    let target = config.target.encode(seq.target_vs30.unwrap());
    let r = grad_check_with(
        |g, v| {
            let out = model.forward_graph(g, v, &seq)?.output;
            let t = g.constant(vec![1], vec![target])?;
            g.mse_loss(out, t)
        },
        model.tensors(),
        &opts,
    )?;
    entries.push(SuiteEntry::from_report("model", &r));

    Ok(SuiteReport {
        tol: opts.tol,
        step: opts.step,
        entries,
    })
}
