use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::metrics::{fmt_opt, MetricsReport, StationPrediction};
use super::{ExperimentConfig, Role, SplitPlan, TrainingMethod};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::nn::{build_optimizer, Graph, Optimizer};
use crate::picker::PickSet;
use crate::preprocess::{extract_window, normalize, SegmentSequence, WindowSpec};
use crate::signal_store::Dataset;
use crate::site_class::ClassBoundaries;

#[derive(Debug, Clone, PartialEq)]
pub struct PreparedSet {
    pub sequences: Vec<SegmentSequence>,
    /// Records left out because the window needs picks they lack.
    pub skipped: Vec<String>,
}

/// Normalized, labeled sequences for every record of `stations`.
pub fn prepare_sequences(
    dataset: &Dataset,
    picks: &PickSet,
    window: &WindowSpec,
    stations: &BTreeSet<String>,
) -> Result<PreparedSet> {
    let mut sequences = Vec::new();
    let mut skipped = Vec::new();
    for r in dataset.records().iter().filter(|r| stations.contains(&r.station_id)) {
        let Some(vs30) = dataset.record_vs30(r) else {
            continue;
        };
        let (p, s) = if window.needs_picks() {
            match picks.get(window.annotation_source, &r.record_id) {
                Some(pk) => (Some(pk.p_idx), Some(pk.s_idx)),
                None => {
                    skipped.push(r.record_id.clone());
                    continue;
                }
            }
        } else {
            (None, None)
        };
        let seq = extract_window(r, window, p, s)?;
        sequences.push(normalize(&seq).with_target(Some(vs30)));
    }
    Ok(PreparedSet { sequences, skipped })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    /// Mean absolute station error in m/s.
    pub val_abs_err: Option<f64>,
    pub val_pct_err: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    /// Parameters of the selected epoch.
    pub params: ModelParams,
    pub curves: Vec<EpochStats>,
    pub best_epoch: usize,
    /// MSE of the selected parameters over the training sequences.
    pub final_train_mse: f64,
    pub train_records: usize,
    pub val_records: usize,
    pub skipped_records: Vec<String>,
}

pub fn curves_csv(curves: &[EpochStats]) -> String {
    let mut s = String::from("epoch,train_loss,val_abs_err,val_pct_err\n");
    for c in curves {
        s.push_str(&format!(
            "{},{:.10e},{},{}\n",
            c.epoch,
            c.train_loss,
            fmt_opt(c.val_abs_err, 6),
            fmt_opt(c.val_pct_err, 6)
        ));
    }
    s
}

/// Fresh parameters, with the encoder transferred when the config asks.
pub fn initial_params(cfg: &ExperimentConfig, model: &ModelConfig) -> Result<ModelParams> {
    let params = ModelParams::init(model, cfg.seed)?;
    match cfg.training_method {
        TrainingMethod::Scratch => Ok(params),
        TrainingMethod::Transfer => {
            let path = cfg
                .encoder_checkpoint
                .as_ref()
                .ok_or_else(|| Error::Config("transfer training needs encoder_checkpoint".into()))?;
            params.transfer_load(path, cfg.freeze_encoder, cfg.seed)
        }
    }
}

fn batch_step(
    params: &mut ModelParams,
    optimizer: &mut dyn Optimizer,
    batch: &[&SegmentSequence],
) -> Result<f64> {
    let mut g = Graph::new();
    let vars = params.bind(&mut g);
    let mut outs = Vec::with_capacity(batch.len());
    let mut targets = Vec::with_capacity(batch.len());
    for seq in batch {
        outs.push(params.forward_graph(&mut g, &vars, seq)?.output);
        targets.push(target_of(params, seq)?);
    }
    let pred = g.concat(&outs);
    let tgt = g.constant(vec![targets.len()], targets)?;
    let loss = g.mse_loss(pred, tgt)?;
    let value = g.scalar(loss);
    if !value.is_finite() {
        return Ok(value);
    }
    g.backward(loss)?;
    for (t, v) in params.tensors_mut().iter_mut().zip(&vars) {
        match g.grad(*v) {
            Some(grad) => t.set_grad(grad.to_vec())?,
            None => t.zero_grad(),
        }
    }
    optimizer.step(params.tensors_mut());
    Ok(value)
}

fn target_of(params: &ModelParams, seq: &SegmentSequence) -> Result<f64> {
    let vs30 = seq.target_vs30.ok_or_else(|| Error::InvalidRecord {
        record_id: seq.record_id.clone(),
        message: "sequence has no Vs30 target".into(),
    })?;
    Ok(params.config().target.encode(vs30))
}

fn mse_over(params: &ModelParams, seqs: &[SegmentSequence]) -> Result<f64> {
    let mut sum = 0.0;
    for s in seqs {
        sum += (params.forward(s)? - target_of(params, s)?).powi(2);
    }
    Ok(sum / seqs.len() as f64)
}

fn without_grads(params: &ModelParams) -> ModelParams {
    let mut p = params.clone();
    p.tensors_mut().iter_mut().for_each(|t| t.zero_grad());
    p
}

/// Minibatch training on prepared sequences.
///
/// The head bias starts at the mean training target so the regression does
/// not spend its first epochs walking from zero to about 2.7 (log10 m/s).
/// The returned parameters are those of the epoch with the lowest
/// validation percentage error, or the lowest training loss without a
/// validation set.
pub fn train_sequences(
    cfg: &ExperimentConfig,
    mut params: ModelParams,
    train: &[SegmentSequence],
    val: &[SegmentSequence],
) -> Result<TrainOutcome> {
    if train.is_empty() {
        return Err(Error::EmptySplit("no training sequences".into()));
    }
    let mean_target = train
        .iter()
        .map(|s| target_of(&params, s))
        .sum::<Result<f64>>()?
        / train.len() as f64;
    params.set_head_bias(mean_target);
    let mut optimizer = build_optimizer(cfg.optimizer, cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6261_7463_6865_73);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut curves = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, ModelParams)> = None;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&SegmentSequence> = chunk.iter().map(|&i| &train[i]).collect();
            let loss = batch_step(&mut params, optimizer.as_mut(), &batch)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, loss });
            }
            total += loss * batch.len() as f64;
        }
        let train_loss = total / train.len() as f64;
        let (val_abs_err, val_pct_err) = if val.is_empty() {
            (None, None)
        } else {
            let report = evaluate_sequences(&params, val, &cfg.class_boundaries)?;
            let abs = report
                .per_station
                .values()
                .map(|p| (p.predicted_vs30 - p.true_vs30).abs())
                .sum::<f64>()
                / report.per_station.len() as f64;
            (Some(abs), report.total.abs_mean_error_pct)
        };
        log::debug!("epoch {epoch}: train {train_loss:.6e} val% {val_pct_err:?}");
        curves.push(EpochStats {
            epoch,
            train_loss,
            val_abs_err,
            val_pct_err,
        });
        let score = val_pct_err.unwrap_or(train_loss);
        if best.as_ref().is_none_or(|(b, _, _)| score < *b) {
            best = Some((score, epoch, without_grads(&params)));
        }
    }
    let (_, best_epoch, params) = best.expect("at least one epoch runs");
    Ok(TrainOutcome {
        final_train_mse: mse_over(&params, train)?,
        params,
        curves,
        best_epoch,
        train_records: train.len(),
        val_records: val.len(),
        skipped_records: Vec::new(),
    })
}

fn sample_rate_of(dataset: &Dataset, stations: &BTreeSet<String>) -> Result<f64> {
    dataset
        .records()
        .iter()
        .find(|r| stations.contains(&r.station_id))
        .map(|r| r.sample_rate)
        .ok_or_else(|| Error::EmptySplit("training stations have no records".into()))
}

/// Trains on the plan's train stations, selecting on its val stations.
pub fn train(cfg: &ExperimentConfig, dataset: &Dataset, picks: &PickSet, plan: &SplitPlan) -> Result<TrainOutcome> {
    cfg.validate()?;
    plan.verify(dataset)?;
    let window = cfg.window_for(cfg.annotation_train);
    let tr = prepare_sequences(dataset, picks, &window, plan.stations(Role::Train))?;
    let va = prepare_sequences(dataset, picks, &window, plan.stations(Role::Val))?;
    let model = cfg.model_config(sample_rate_of(dataset, plan.stations(Role::Train))?)?;
    let params = initial_params(cfg, &model)?;
    let mut out = train_sequences(cfg, params, &tr.sequences, &va.sequences)?;
    out.skipped_records = tr.skipped.into_iter().chain(va.skipped).collect();
    Ok(out)
}

/// Per-station mean predictions and the derived report. Ground truth comes
/// from each sequence's target.
pub fn evaluate_sequences(
    params: &ModelParams,
    seqs: &[SegmentSequence],
    bounds: &ClassBoundaries,
) -> Result<MetricsReport> {
    let mut by_station: BTreeMap<String, (f64, Vec<f64>)> = BTreeMap::new();
    for s in seqs {
        let truth = s.target_vs30.ok_or_else(|| Error::InvalidRecord {
            record_id: s.record_id.clone(),
            message: "sequence has no Vs30 target".into(),
        })?;
        let pred = params.predict_vs30(s)?;
        by_station.entry(s.station_id.clone()).or_insert((truth, Vec::new())).1.push(pred);
    }
    let per_station = by_station
        .into_iter()
        .map(|(id, (truth, mut preds))| {
            // fixed summation order keeps the mean independent of record order
            preds.sort_by(f64::total_cmp);
            let mean = preds.iter().sum::<f64>() / preds.len() as f64;
            (
                id,
                StationPrediction {
                    true_vs30: truth,
                    predicted_vs30: mean,
                    record_count: preds.len(),
                },
            )
        })
        .collect();
    MetricsReport::from_predictions(per_station, bounds)
}

/// Test-set metrics. Disjointness is checked again here, on the plan and
/// on every evaluated record.
pub fn evaluate(
    params: &ModelParams,
    cfg: &ExperimentConfig,
    dataset: &Dataset,
    picks: &PickSet,
    plan: &SplitPlan,
) -> Result<MetricsReport> {
    plan.verify(dataset)?;
    let window = cfg.window_for(cfg.annotation_test);
    let test = prepare_sequences(dataset, picks, &window, plan.stations(Role::Test))?;
    if test.sequences.is_empty() {
        return Err(Error::EmptySplit("no test sequences".into()));
    }
    for s in &test.sequences {
        if plan.train_station_ids.contains(&s.station_id) || plan.val_station_ids.contains(&s.station_id) {
            return Err(Error::Disjointness(format!(
                "test record {} belongs to training station {}",
                s.record_id, s.station_id
            )));
        }
    }
    evaluate_sequences(params, &test.sequences, &cfg.class_boundaries)
}
