use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::metrics::{table_rows, MetricsReport, TABLE_HEADER};
use super::train::{curves_csv, evaluate, train, EpochStats};
use super::{ExperimentConfig, SplitPlan, TrainingMethod};
use crate::error::{Error, Result};
use crate::fsutil::{write_atomic, write_json};
use crate::picker::PickSet;
use crate::preprocess::{AnnotationSource, Anchor, WindowSpec};

/// Length of the P-centred windows.
pub const P_WINDOW_S: f64 = 15.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Segment {
    Pga,
    P15,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridCell {
    pub name: String,
    pub training_method: TrainingMethod,
    pub ps_info: bool,
    pub annotation_train: AnnotationSource,
    pub annotation_test: AnnotationSource,
    pub segment: Segment,
    /// Cell whose trained encoder a transfer cell starts from.
    pub encoder_from: Option<String>,
}

impl GridCell {
    /// File-name form: `alpha_{auto,PGA}` → `alpha_auto_PGA`.
    pub fn slug(&self) -> String {
        self.name.replace(['{', '}'], "").replace(',', "_")
    }

    pub fn channels(&self) -> usize {
        if self.ps_info {
            4
        } else {
            3
        }
    }

    pub fn config(&self, base: &ExperimentConfig, encoder: Option<PathBuf>) -> ExperimentConfig {
        let window = match self.segment {
            Segment::Pga => WindowSpec {
                anchor: Anchor::Pga,
                ..base.window.clone()
            },
            Segment::P15 => WindowSpec {
                anchor: Anchor::PArrival,
                duration_s: P_WINDOW_S,
                ..base.window.clone()
            },
        };
        ExperimentConfig {
            training_method: self.training_method,
            ps_info: self.ps_info,
            annotation_train: self.annotation_train,
            annotation_test: self.annotation_test,
            window: WindowSpec {
                include_ps_channel: self.ps_info,
                annotation_source: self.annotation_train,
                ..window
            },
            encoder_checkpoint: encoder,
            ..base.clone()
        }
    }

    /// Cells with equal keys train identically and differ only at test time.
    fn training_key(&self) -> (TrainingMethod, bool, AnnotationSource, Segment, Option<String>) {
        (
            self.training_method,
            self.ps_info,
            self.annotation_train,
            self.segment,
            self.encoder_from.clone(),
        )
    }
}

/// The twelve cells, in table order.
pub fn grid_cells() -> Vec<GridCell> {
    use AnnotationSource::{Auto, Manual};
    let mut cells = Vec::new();
    for (prefix, ps) in [("alpha", true), ("beta", false)] {
        for (tag, test) in [("auto", Auto), ("man", Manual)] {
            for (seg, seg_name) in [(Segment::Pga, "PGA"), (Segment::P15, "P,15sec")] {
                cells.push(GridCell {
                    name: format!("{prefix}_{{{tag},{seg_name}}}"),
                    training_method: TrainingMethod::Scratch,
                    ps_info: ps,
                    annotation_train: Auto,
                    annotation_test: test,
                    segment: seg,
                    encoder_from: None,
                });
            }
        }
    }
    for (tag, ps, source) in [("ps", true, "alpha_{auto,PGA}"), ("-", false, "beta_{auto,PGA}")] {
        for (test_tag, test) in [("auto", Auto), ("man", Manual)] {
            cells.push(GridCell {
                name: format!("gamma_{{{tag},{test_tag}}}"),
                training_method: TrainingMethod::Transfer,
                ps_info: ps,
                annotation_train: Auto,
                annotation_test: test,
                segment: Segment::Pga,
                encoder_from: Some(source.into()),
            });
        }
    }
    cells
}

pub fn cell_names() -> Vec<String> {
    grid_cells().into_iter().map(|c| c.name).collect()
}

/// Per-epoch min/mean/max across repeats.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurveBand {
    pub epoch: usize,
    pub train_loss: [f64; 3],
    pub val_pct_err: Option<[f64; 3]>,
}

fn band(values: &[f64]) -> [f64; 3] {
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    [min, values.iter().sum::<f64>() / values.len() as f64, max]
}

pub fn curve_bands(runs: &[Vec<EpochStats>]) -> Vec<CurveBand> {
    let epochs = runs.iter().map(Vec::len).min().unwrap_or(0);
    (0..epochs)
        .map(|e| {
            let loss: Vec<f64> = runs.iter().map(|r| r[e].train_loss).collect();
            let val: Option<Vec<f64>> = runs.iter().map(|r| r[e].val_pct_err).collect();
            CurveBand {
                epoch: e + 1,
                train_loss: band(&loss),
                val_pct_err: val.map(|v| band(&v)),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridReport {
    pub experiment: String,
    pub channels: usize,
    pub config: ExperimentConfig,
    pub split: SplitPlan,
    /// Metrics of the first repeat.
    pub metrics: Option<MetricsReport>,
    /// Test total error of every repeat, in seed order.
    pub repeat_total_error_pct: Vec<Option<f64>>,
    pub curves: Vec<EpochStats>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub curve_bands: Vec<CurveBand>,
    pub best_epoch: Option<usize>,
    pub skipped_records: usize,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridOutcome {
    pub reports: Vec<GridReport>,
}

impl GridOutcome {
    pub fn get(&self, name: &str) -> Option<&GridReport> {
        self.reports.iter().find(|r| r.experiment == name)
    }
}

struct Trained {
    runs: Vec<super::TrainOutcome>,
    encoder_path: PathBuf,
}

/// Runs every grid cell on one shared split. `repeats` seeds are
/// `base.seed, base.seed + 1, …`. Transfer cells read encoders written to
/// `work_dir`. A failing cell is reported and the grid carries on.
pub fn run_grid(
    dataset: &crate::signal_store::Dataset,
    picks: &PickSet,
    base: &ExperimentConfig,
    plan: &SplitPlan,
    repeats: usize,
    work_dir: &Path,
) -> Result<GridOutcome> {
    if repeats == 0 {
        return Err(Error::Config("repeats must be >= 1".into()));
    }
    plan.verify(dataset)?;
    let cells = grid_cells();
    let mut trained: BTreeMap<String, std::result::Result<Trained, String>> = BTreeMap::new();
    let mut key_owner: Vec<(_, String)> = Vec::new();
    let mut reports = Vec::with_capacity(cells.len());
    for cell in &cells {
        let key = cell.training_key();
        let owner = match key_owner.iter().find(|(k, _)| *k == key) {
            Some((_, owner)) => owner.clone(),
            None => {
                log::info!("training {}", cell.name);
                let result = train_cell(cell, base, dataset, picks, plan, repeats, work_dir, &trained);
                trained.insert(cell.name.clone(), result);
                key_owner.push((key, cell.name.clone()));
                cell.name.clone()
            }
        };
        let encoder = cell
            .encoder_from
            .as_ref()
            .and_then(|src| trained.get(src))
            .and_then(|t| t.as_ref().ok())
            .map(|t| t.encoder_path.clone());
        let config = cell.config(base, encoder);
        let mut report = GridReport {
            experiment: cell.name.clone(),
            channels: cell.channels(),
            config: config.clone(),
            split: plan.clone(),
            metrics: None,
            repeat_total_error_pct: Vec::new(),
            curves: Vec::new(),
            curve_bands: Vec::new(),
            best_epoch: None,
            skipped_records: 0,
            error: None,
        };
        match &trained[&owner] {
            Err(e) => report.error = Some(e.clone()),
            Ok(t) => {
                let mut firsts = None;
                for (r, run) in t.runs.iter().enumerate() {
                    let cfg = ExperimentConfig {
                        seed: base.seed + r as u64,
                        ..config.clone()
                    };
                    match evaluate(&run.params, &cfg, dataset, picks, plan) {
                        Ok(m) => {
                            report.repeat_total_error_pct.push(m.total.abs_mean_error_pct);
                            firsts.get_or_insert(m);
                        }
                        Err(e) => {
                            report.error = Some(format!("evaluation: {e}"));
                            break;
                        }
                    }
                }
                report.metrics = firsts;
                report.curves = t.runs[0].curves.clone();
                report.best_epoch = Some(t.runs[0].best_epoch);
                report.skipped_records = t.runs[0].skipped_records.len();
                if repeats > 1 {
                    let all: Vec<_> = t.runs.iter().map(|r| r.curves.clone()).collect();
                    report.curve_bands = curve_bands(&all);
                }
            }
        }
        if let Some(e) = &report.error {
            log::warn!("{}: {e}", cell.name);
        }
        reports.push(report);
    }
    Ok(GridOutcome { reports })
}

#[allow(clippy::too_many_arguments)]
fn train_cell(
    cell: &GridCell,
    base: &ExperimentConfig,
    dataset: &crate::signal_store::Dataset,
    picks: &PickSet,
    plan: &SplitPlan,
    repeats: usize,
    work_dir: &Path,
    trained: &BTreeMap<String, std::result::Result<Trained, String>>,
) -> std::result::Result<Trained, String> {
    let encoder = match &cell.encoder_from {
        None => None,
        Some(src) => match trained.get(src) {
            Some(Ok(t)) => Some(t.encoder_path.clone()),
            Some(Err(_)) => return Err(format!("source cell {src} failed")),
            None => return Err(format!("source cell {src} has not run")),
        },
    };
    let config = cell.config(base, encoder);
    let mut runs = Vec::with_capacity(repeats);
    for r in 0..repeats {
        let cfg = ExperimentConfig {
            seed: base.seed + r as u64,
            ..config.clone()
        };
        runs.push(train(&cfg, dataset, picks, plan).map_err(|e| e.to_string())?);
    }
    let encoder_path = work_dir.join("encoders").join(format!("{}.bin", cell.slug()));
    runs[0].params.save_encoder(&encoder_path).map_err(|e| e.to_string())?;
    Ok(Trained { runs, encoder_path })
}

fn bands_csv(bands: &[CurveBand]) -> String {
    let mut s = String::from("epoch,train_loss_min,train_loss_mean,train_loss_max,val_pct_min,val_pct_mean,val_pct_max\n");
    for b in bands {
        let v = b.val_pct_err.map(|v| v.map(|x| format!("{x:.6}"))).unwrap_or_else(|| ["NaN".into(), "NaN".into(), "NaN".into()]);
        s.push_str(&format!(
            "{},{:.10e},{:.10e},{:.10e},{},{},{}\n",
            b.epoch, b.train_loss[0], b.train_loss[1], b.train_loss[2], v[0], v[1], v[2]
        ));
    }
    s
}

/// Writes `{slug}.json` and `{slug}_curves.csv` per cell plus the combined
/// `grid_table.csv`. Returns the written paths.
pub fn write_grid_outputs(outcome: &GridOutcome, dir: &Path) -> Result<Vec<PathBuf>> {
    let slugs: BTreeMap<String, String> = grid_cells().into_iter().map(|c| (c.name.clone(), c.slug())).collect();
    let mut written = Vec::new();
    let mut table = vec![TABLE_HEADER.to_string()];
    for r in &outcome.reports {
        let slug = slugs.get(&r.experiment).cloned().unwrap_or_else(|| r.experiment.clone());
        let path = dir.join(format!("{slug}.json"));
        write_json(&path, r)?;
        written.push(path);
        let path = dir.join(format!("{slug}_curves.csv"));
        write_atomic(&path, curves_csv(&r.curves).as_bytes())?;
        written.push(path);
        if !r.curve_bands.is_empty() {
            let path = dir.join(format!("{slug}_bands.csv"));
            write_atomic(&path, bands_csv(&r.curve_bands).as_bytes())?;
            written.push(path);
        }
        if let Some(m) = &r.metrics {
            table.extend(table_rows(&r.experiment, m));
        }
    }
    let mut text = table.join("\n");
    text.push('\n');
    let path = dir.join("grid_table.csv");
    write_atomic(&path, text.as_bytes())?;
    written.push(path);
    Ok(written)
}
