//! Subcommands of the `vs30` tool. `main` only parses arguments and maps a
//! [`Failure`] to a nonzero exit.

pub mod config;

use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use vs30_core::experiment::{
    curves_csv, evaluate, run_grid, split_by_station, table_rows, train, write_grid_outputs, MetricsReport, SplitPlan,
    TABLE_HEADER,
};
use vs30_core::fsutil::{write_atomic, write_json};
use vs30_core::gradsuite::run_gradient_suite;
use vs30_core::model::{load_checkpoint, save_checkpoint};
use vs30_core::nn::{GradFault, OpKind};
use vs30_core::picker::{
    auto_pick_dataset, load_manual_picks, manual_picks_from_dataset, write_picks_csv, PickSet,
};
use vs30_core::preprocess::AnnotationSource;
use vs30_core::regional::{
    assignments_csv, cluster_errors, cluster_stations, elbow_csv, elbow_select, errors_csv, errors_svg,
    station_features, ClusterReport, ElbowResult,
};
use vs30_core::signal_store::{load_dataset, synthesize_dataset, write_dataset, ChannelStorage, Dataset};

pub use config::{parse_set, RunConfig};

/// Environment variable naming the output root when `--out` is absent.
pub const OUT_ENV: &str = "VS30_OUT";
pub const RUN_META: &str = "run_meta.json";

#[derive(Debug, Parser)]
#[command(name = "vs30", version, about = "Vs30 regression from strong-motion records")]
pub struct Cli {
    /// Output root. Defaults to $VS30_OUT, then ./vs30_out.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

impl Cli {
    pub fn command_name(&self) -> &'static str {
        match self.command {
            Command::Synth { .. } => "synth",
            Command::Pick { .. } => "pick",
            Command::Train { .. } => "train",
            Command::Eval { .. } => "eval",
            Command::Grid { .. } => "grid",
            Command::Region { .. } => "region",
            Command::Gradcheck { .. } => "gradcheck",
            Command::Rerun { .. } => "rerun",
        }
    }
}

#[derive(Debug, Args, Default)]
pub struct Common {
    /// JSON config; a previous run_meta.json also works.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override any config key, e.g. `--set epochs=5`.
    #[arg(long = "set", value_name = "KEY=VALUE", value_parser = parse_set)]
    pub set: Vec<(String, Value)>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Dataset manifest.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        stations: Option<u64>,
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        records_per_station: Option<u64>,
        /// Record length in seconds.
        #[arg(long)]
        record_duration: Option<f64>,
        #[arg(long)]
        sample_rate: Option<f64>,
        /// Keep samples inside the manifest.
        #[arg(long)]
        inline: bool,
    },
    /// Annotate P and S arrivals.
    Pick {
        #[command(flatten)]
        common: Common,
        /// `auto` (STA/LTA) or `manual`.
        #[arg(long)]
        method: Option<String>,
        /// Manual picks CSV to validate (with `--method manual`).
        #[arg(long)]
        file: Option<PathBuf>,
        #[arg(long)]
        sta: Option<f64>,
        #[arg(long)]
        lta: Option<f64>,
        #[arg(long)]
        ratio: Option<f64>,
    },
    /// Train one model on the configured split.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        split_seed: Option<u64>,
        #[arg(long)]
        encoder_checkpoint: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the test stations of the configured split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        split_seed: Option<u64>,
    },
    /// Run all twelve experiment cells.
    Grid {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        repeats: Option<usize>,
    },
    /// Cluster stations and break test errors down by cluster.
    Region {
        #[command(flatten)]
        common: Common,
        /// Metrics JSON from `eval` (or a grid cell report).
        #[arg(long)]
        metrics: Option<PathBuf>,
        #[arg(long, num_args = 2, value_names = ["K_MIN", "K_MAX"])]
        k_range: Option<Vec<usize>>,
    },
    /// Finite-difference check of every differentiable op.
    Gradcheck {
        #[arg(long)]
        seed: Option<u64>,
        /// Double one op's backward gradient; the suite should then fail.
        #[arg(long, hide = true, value_name = "OP")]
        inject_fault: Option<String>,
    },
    /// Repeat a run from its run_meta.json.
    Rerun { meta: PathBuf },
}

/// A failed run: the stage that failed and why.
#[derive(Debug)]
pub struct Failure {
    pub stage: &'static str,
    pub error: anyhow::Error,
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} failed: {:#}", self.stage, self.error)
    }
}

trait Stage<T> {
    fn stage(self, name: &'static str) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> Stage<T> for Result<T, E> {
    fn stage(self, name: &'static str) -> Result<T, Failure> {
        self.map_err(|e| Failure {
            stage: name,
            error: e.into(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaultSpec {
    pub op: String,
    pub scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Seeds {
    pub seed: u64,
    pub split_seed: u64,
}

/// Everything needed to repeat a run. The output root is deliberately left
/// out so a rerun elsewhere produces identical files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub command: String,
    pub version: String,
    pub seeds: Seeds,
    /// Input scaling applied before the model.
    #[serde(default)]
    pub normalization: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fault: Option<FaultSpec>,
    pub config: RunConfig,
}

pub fn out_root(flag: Option<&Path>) -> PathBuf {
    flag.map(Path::to_path_buf)
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("vs30_out"))
}

fn push<T: Serialize>(v: &mut Vec<(String, Value)>, key: &str, value: Option<T>) {
    if let Some(x) = value {
        v.push((key.to_string(), serde_json::to_value(x).expect("flag values serialize")));
    }
}

fn resolve(common: &Common, mut flags: Vec<(String, Value)>) -> Result<RunConfig, Failure> {
    push(&mut flags, "seed", common.seed);
    push(&mut flags, "dataset", common.dataset.as_ref());
    // --set comes last so it wins over the named flags too
    flags.extend(common.set.iter().cloned());
    RunConfig::resolve(common.config.as_deref(), &flags).stage("config")
}

/// Parses flags into a resolved run and executes it. Returns written paths.
pub fn run(cli: Cli) -> Result<Vec<PathBuf>, Failure> {
    let out = out_root(cli.out.as_deref());
    let (command, cfg, fault) = match cli.command {
        Command::Synth {
            common,
            stations,
            records_per_station,
            record_duration,
            sample_rate,
            inline,
        } => {
            let mut f = Vec::new();
            push(&mut f, "stations", stations);
            push(&mut f, "records_per_station", records_per_station);
            push(&mut f, "record_duration_s", record_duration);
            push(&mut f, "sample_rate", sample_rate);
            push(&mut f, "inline_samples", inline.then_some(true));
            ("synth", resolve(&common, f)?, None)
        }
        Command::Pick {
            common,
            method,
            file,
            sta,
            lta,
            ratio,
        } => {
            let mut f = Vec::new();
            push(&mut f, "pick_method", method.map(|m| m.to_uppercase()));
            push(&mut f, "picks_file", file);
            push(&mut f, "sta_s", sta);
            push(&mut f, "lta_s", lta);
            push(&mut f, "trigger_ratio", ratio);
            ("pick", resolve(&common, f)?, None)
        }
        Command::Train {
            common,
            epochs,
            lr,
            split_seed,
            encoder_checkpoint,
        } => {
            let mut f = Vec::new();
            push(&mut f, "epochs", epochs);
            push(&mut f, "lr", lr);
            push(&mut f, "split_seed", split_seed);
            push(&mut f, "encoder_checkpoint", encoder_checkpoint);
            ("train", resolve(&common, f)?, None)
        }
        Command::Eval {
            common,
            checkpoint,
            split_seed,
        } => {
            let mut f = Vec::new();
            push(&mut f, "checkpoint", checkpoint);
            push(&mut f, "split_seed", split_seed);
            ("eval", resolve(&common, f)?, None)
        }
        Command::Grid {
            common,
            epochs,
            repeats,
        } => {
            let mut f = Vec::new();
            push(&mut f, "epochs", epochs);
            push(&mut f, "repeats", repeats);
            ("grid", resolve(&common, f)?, None)
        }
        Command::Region {
            common,
            metrics,
            k_range,
        } => {
            let mut f = Vec::new();
            push(&mut f, "metrics", metrics);
            if let Some(r) = k_range {
                push(&mut f, "k_min", Some(r[0]));
                push(&mut f, "k_max", Some(r[1]));
            }
            ("region", resolve(&common, f)?, None)
        }
        Command::Gradcheck { seed, inject_fault } => {
            let common = Common {
                seed,
                ..Common::default()
            };
            let fault = inject_fault.map(|op| FaultSpec { op, scale: 2.0 });
            ("gradcheck", resolve(&common, Vec::new())?, fault)
        }
        Command::Rerun { meta } => {
            let text = std::fs::read_to_string(&meta)
                .with_context(|| format!("reading {}", meta.display()))
                .stage("config")?;
            let m: RunMeta = serde_json::from_str(&text)
                .with_context(|| format!("parsing {}", meta.display()))
                .stage("config")?;
            return execute(&m.command, &m.config, m.fault.as_ref(), &out);
        }
    };
    execute(command, &cfg, fault.as_ref(), &out)
}

/// Runs `command` with a resolved config, writing under `out`, and finishes
/// with `run_meta.json`.
pub fn execute(command: &str, cfg: &RunConfig, fault: Option<&FaultSpec>, out: &Path) -> Result<Vec<PathBuf>, Failure> {
    std::fs::create_dir_all(out)
        .with_context(|| format!("creating {}", out.display()))
        .stage("output")?;
    let mut written = match command {
        "synth" => cmd_synth(cfg, out)?,
        "pick" => cmd_pick(cfg, out)?,
        "train" => cmd_train(cfg, out)?,
        "eval" => cmd_eval(cfg, out)?,
        "grid" => cmd_grid(cfg, out)?,
        "region" => cmd_region(cfg, out)?,
        "gradcheck" => cmd_gradcheck(cfg, fault, out)?,
        other => return Err(anyhow!("unknown command {other:?}")).stage("config"),
    };
    let meta = RunMeta {
        command: command.to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        seeds: Seeds {
            seed: cfg.seed,
            split_seed: cfg.split_seed,
        },
        normalization: vs30_core::preprocess::NORMALIZATION.to_string(),
        fault: fault.cloned(),
        config: cfg.clone(),
    };
    let path = out.join(RUN_META);
    write_json(&path, &meta).stage("write run_meta")?;
    written.push(path);
    Ok(written)
}

fn dataset(cfg: &RunConfig) -> Result<Dataset, Failure> {
    match &cfg.dataset {
        Some(p) => load_dataset(p).stage("load dataset"),
        None => synthesize_dataset(&cfg.synth()).stage("synthesize"),
    }
}

fn manual_picks(cfg: &RunConfig, ds: &Dataset) -> Result<Vec<vs30_core::picker::PickResult>, Failure> {
    match &cfg.picks_file {
        Some(p) => load_manual_picks(p, ds).stage("load picks"),
        None => Ok(manual_picks_from_dataset(ds)),
    }
}

fn pick_set(cfg: &RunConfig, ds: &Dataset) -> Result<PickSet, Failure> {
    let (auto, failed) = auto_pick_dataset(ds, &cfg.sta_lta()).stage("pick")?;
    if !failed.is_empty() {
        log::warn!("STA/LTA found no trigger in {} record(s)", failed.len());
    }
    let mut set = PickSet::new(manual_picks(cfg, ds)?, auto);
    set.auto_failures = failed;
    Ok(set)
}

fn plan(cfg: &RunConfig, ds: &Dataset) -> Result<SplitPlan, Failure> {
    let plan = split_by_station(ds, cfg.split_seed, cfg.train_fraction, &cfg.class_boundaries)
        .and_then(|p| p.with_validation(cfg.val_fraction, cfg.split_seed))
        .stage("split")?;
    for w in &plan.warnings {
        log::warn!("{w}");
    }
    Ok(plan)
}

fn write_text(path: PathBuf, text: &str, written: &mut Vec<PathBuf>) -> Result<(), Failure> {
    write_atomic(&path, text.as_bytes()).stage("write outputs")?;
    written.push(path);
    Ok(())
}

fn write_value<T: Serialize>(path: PathBuf, value: &T, written: &mut Vec<PathBuf>) -> Result<(), Failure> {
    write_json(&path, value).stage("write outputs")?;
    written.push(path);
    Ok(())
}

fn cmd_synth(cfg: &RunConfig, out: &Path) -> Result<Vec<PathBuf>, Failure> {
    let ds = synthesize_dataset(&cfg.synth()).stage("synthesize")?;
    let manifest = out.join("dataset").join("manifest.json");
    let storage = if cfg.inline_samples {
        ChannelStorage::Inline
    } else {
        ChannelStorage::Binary
    };
    write_dataset(&ds, &manifest, storage).stage("write dataset")?;
    log::info!(
        "{} stations, {} records -> {}",
        ds.stations().len(),
        ds.records().len(),
        manifest.display()
    );
    Ok(vec![manifest])
}

fn cmd_pick(cfg: &RunConfig, out: &Path) -> Result<Vec<PathBuf>, Failure> {
    let ds = dataset(cfg)?;
    let mut written = Vec::new();
    let picks = match cfg.pick_method {
        AnnotationSource::Manual => manual_picks(cfg, &ds)?,
        AnnotationSource::Auto => {
            let (picks, failed) = auto_pick_dataset(&ds, &cfg.sta_lta()).stage("pick")?;
            let mut text = String::from("record_id\n");
            failed.iter().for_each(|id| text.push_str(&format!("{id}\n")));
            write_text(out.join("pick_failures.csv"), &text, &mut written)?;
            log::info!("{} picked, {} without trigger", picks.len(), failed.len());
            picks
        }
    };
    let path = out.join("picks.csv");
    write_picks_csv(&path, &picks, true).stage("write outputs")?;
    written.push(path);
    Ok(written)
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    best_epoch: usize,
    final_train_mse: f64,
    train_records: usize,
    val_records: usize,
    skipped_records: &'a [String],
    split: &'a SplitPlan,
}

fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<Vec<PathBuf>, Failure> {
    let exp = cfg.experiment();
    exp.validate().stage("config")?;
    let ds = dataset(cfg)?;
    let picks = pick_set(cfg, &ds)?;
    let plan = plan(cfg, &ds)?;
    let outcome = train(&exp, &ds, &picks, &plan).stage("train")?;
    let mut written = Vec::new();
    let model = out.join("model.bin");
    save_checkpoint(&model, &outcome.params, &exp.window_for(exp.annotation_train)).stage("write checkpoint")?;
    written.push(model);
    let encoder = out.join("encoder.bin");
    outcome.params.save_encoder(&encoder).stage("write checkpoint")?;
    written.push(encoder);
    write_text(out.join("curves.csv"), &curves_csv(&outcome.curves), &mut written)?;
    let summary = TrainSummary {
        best_epoch: outcome.best_epoch,
        final_train_mse: outcome.final_train_mse,
        train_records: outcome.train_records,
        val_records: outcome.val_records,
        skipped_records: &outcome.skipped_records,
        split: &plan,
    };
    write_value(out.join("train_summary.json"), &summary, &mut written)?;
    log::info!(
        "best epoch {} of {}, train mse {:.3e}",
        outcome.best_epoch,
        exp.epochs,
        outcome.final_train_mse
    );
    Ok(written)
}

fn table_csv(name: &str, report: &MetricsReport) -> String {
    let mut s = format!("{TABLE_HEADER}\n");
    for row in table_rows(name, report) {
        s.push_str(&row);
        s.push('\n');
    }
    s
}

fn cmd_eval(cfg: &RunConfig, out: &Path) -> Result<Vec<PathBuf>, Failure> {
    let path = cfg
        .checkpoint
        .clone()
        .ok_or_else(|| anyhow!("eval needs --checkpoint"))
        .stage("config")?;
    let exp = cfg.experiment();
    exp.validate().stage("config")?;
    let ck = load_checkpoint(&path).stage("load checkpoint")?;
    ck.check_window(&path, &exp.window_for(exp.annotation_test))
        .stage("load checkpoint")?;
    let ds = dataset(cfg)?;
    let picks = pick_set(cfg, &ds)?;
    let plan = plan(cfg, &ds)?;
    let report = evaluate(&ck.params, &exp, &ds, &picks, &plan).stage("evaluate")?;
    let mut written = Vec::new();
    write_value(out.join("metrics.json"), &report, &mut written)?;
    write_text(out.join("table.csv"), &table_csv("eval", &report), &mut written)?;
    log::info!(
        "{} test stations, total error {}%",
        report.total.station_count,
        vs30_core::experiment::fmt_opt(report.total.abs_mean_error_pct, 2)
    );
    Ok(written)
}

fn cmd_grid(cfg: &RunConfig, out: &Path) -> Result<Vec<PathBuf>, Failure> {
    let base = cfg.experiment();
    let ds = dataset(cfg)?;
    let picks = pick_set(cfg, &ds)?;
    let plan = plan(cfg, &ds)?;
    let work = out.join("work");
    let mut outcome = run_grid(&ds, &picks, &base, &plan, cfg.repeats, &work).stage("grid")?;
    // report paths relative to the output root so reruns elsewhere match
    for r in &mut outcome.reports {
        if let Some(p) = &r.config.encoder_checkpoint {
            if let Ok(rel) = p.strip_prefix(out) {
                r.config.encoder_checkpoint = Some(rel.to_path_buf());
            }
        }
    }
    let mut written = write_grid_outputs(&outcome, &out.join("grid")).stage("write outputs")?;
    let failed: Vec<&str> = outcome
        .reports
        .iter()
        .filter(|r| r.error.is_some())
        .map(|r| r.experiment.as_str())
        .collect();
    if !failed.is_empty() {
        return Err(anyhow!("cells failed: {}", failed.join(", "))).stage("grid");
    }
    written.sort();
    Ok(written)
}

#[derive(Serialize)]
struct RegionSummary<'a> {
    station_count: usize,
    predicted_station_count: usize,
    feature_encoding: &'static str,
    elbow: Option<&'a ElbowResult>,
    clusters: &'a ClusterReport,
}

fn load_metrics(path: &Path) -> anyhow::Result<MetricsReport> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut v: Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    // a grid cell report nests its metrics
    if let Some(m) = v.get_mut("metrics").map(Value::take) {
        v = m;
    }
    if v.is_null() {
        anyhow::bail!("{}: no metrics (the run failed?)", path.display());
    }
    let m: MetricsReport =
        serde_json::from_value(v).with_context(|| format!("{}: not a metrics report", path.display()))?;
    if m.per_station.is_empty() {
        anyhow::bail!("{}: no per-station predictions", path.display());
    }
    Ok(m)
}

fn cmd_region(cfg: &RunConfig, out: &Path) -> Result<Vec<PathBuf>, Failure> {
    let path = cfg
        .metrics
        .clone()
        .ok_or_else(|| anyhow!("region needs --metrics"))
        .stage("config")?;
    let metrics = load_metrics(&path).stage("load metrics")?;
    let ds = dataset(cfg)?;
    let features = station_features(ds.stations().values());
    let points: Vec<Vec<f64>> = features.iter().map(|f| f.vector.to_vec()).collect();
    let mut written = Vec::new();
    let elbow = if cfg.k_min < cfg.k_max {
        let e = elbow_select(&points, cfg.k_min, cfg.k_max, cfg.seed).stage("cluster")?;
        write_text(out.join("elbow.csv"), &elbow_csv(&e.curve), &mut written)?;
        Some(e)
    } else {
        None
    };
    let k = elbow.as_ref().map_or(cfg.k_min, |e| e.k);
    let mut report = cluster_stations(&features, k, cfg.seed).stage("cluster")?;
    cluster_errors(&mut report, &metrics);
    if report.skipped_stations > 0 {
        log::info!("{} clustered station(s) have no prediction", report.skipped_stations);
    }
    write_text(out.join("clusters.csv"), &assignments_csv(&report, ds.stations()), &mut written)?;
    write_text(out.join("cluster_errors.csv"), &errors_csv(&report.per_cluster), &mut written)?;
    write_text(out.join("cluster_errors.svg"), &errors_svg(&report.per_cluster), &mut written)?;
    let summary = RegionSummary {
        station_count: features.len(),
        predicted_station_count: features.len() - report.skipped_stations,
        feature_encoding: "lat, lon, geology code, lithology code; each standardized, equal weight",
        elbow: elbow.as_ref(),
        clusters: &report,
    };
    write_value(out.join("region_report.json"), &summary, &mut written)?;
    log::info!("k = {k} over {} stations", features.len());
    Ok(written)
}

const FAULTABLE: [OpKind; 6] = [
    OpKind::Conv1d,
    OpKind::MaxPool1d,
    OpKind::Relu,
    OpKind::Linear,
    OpKind::LstmCell,
    OpKind::Mse,
];

fn cmd_gradcheck(cfg: &RunConfig, fault: Option<&FaultSpec>, out: &Path) -> Result<Vec<PathBuf>, Failure> {
    let fault = match fault {
        None => None,
        Some(f) => {
            let op = FAULTABLE
                .into_iter()
                .find(|k| k.name() == f.op)
                .ok_or_else(|| anyhow!("no differentiable op named {:?}", f.op))
                .stage("config")?;
            Some(GradFault { op, scale: f.scale })
        }
    };
    let report = run_gradient_suite(fault, cfg.seed).stage("gradcheck")?;
    print!("{}", report.table());
    let mut written = Vec::new();
    write_value(out.join("gradcheck.json"), &report, &mut written)?;
    if !report.passed() {
        let n = report.entries.iter().filter(|e| !e.passed).count();
        return Err(anyhow!("{n} check(s) exceeded tolerance {:e}", report.tol)).stage("gradcheck");
    }
    Ok(written)
}
