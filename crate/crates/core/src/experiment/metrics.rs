use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::site_class::{classify, ClassBoundaries, SiteClass};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StationPrediction {
    pub true_vs30: f64,
    /// Mean of the per-record predictions, m/s.
    pub predicted_vs30: f64,
    pub record_count: usize,
}

impl StationPrediction {
    pub fn pct_error(&self) -> f64 {
        (self.predicted_vs30 - self.true_vs30).abs() / self.true_vs30 * 100.0
    }

    pub fn log_ratio(&self) -> f64 {
        (self.predicted_vs30 / self.true_vs30).log10()
    }
}

/// Station count and mean absolute percentage error; `None` when empty.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorSummary {
    pub station_count: usize,
    pub abs_mean_error_pct: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassRow {
    pub class: SiteClass,
    #[serde(flatten)]
    pub summary: ErrorSummary,
}

/// Signed mean, absolute mean and population std of the absolute log10
/// ratio; all `None` for an empty set.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LogRatioStats {
    pub log_ratio_mean: Option<f64>,
    pub abs_log_ratio_mean: Option<f64>,
    pub abs_log_ratio_std: Option<f64>,
}

pub fn log_ratio_stats(ratios: &[f64]) -> LogRatioStats {
    if ratios.is_empty() {
        return LogRatioStats::default();
    }
    let n = ratios.len() as f64;
    let mean = ratios.iter().sum::<f64>() / n;
    let abs_mean = ratios.iter().map(|r| r.abs()).sum::<f64>() / n;
    let var = ratios.iter().map(|r| (r.abs() - abs_mean).powi(2)).sum::<f64>() / n;
    LogRatioStats {
        log_ratio_mean: Some(mean),
        abs_log_ratio_mean: Some(abs_mean),
        abs_log_ratio_std: Some(var.sqrt()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Classes A to E, empty ones included.
    pub per_site_class: Vec<ClassRow>,
    pub total: ErrorSummary,
    #[serde(flatten)]
    pub log_ratio: LogRatioStats,
    /// How record predictions were reduced to one per station.
    #[serde(default)]
    pub aggregation: String,
    pub per_station: BTreeMap<String, StationPrediction>,
}

fn summarize<'a>(it: impl Iterator<Item = &'a StationPrediction>) -> ErrorSummary {
    let errs: Vec<f64> = it.map(StationPrediction::pct_error).collect();
    ErrorSummary {
        station_count: errs.len(),
        abs_mean_error_pct: (!errs.is_empty()).then(|| errs.iter().sum::<f64>() / errs.len() as f64),
    }
}

pub const STATION_AGGREGATION: &str = "mean of record predictions";

impl MetricsReport {
    pub fn from_predictions(
        per_station: BTreeMap<String, StationPrediction>,
        bounds: &ClassBoundaries,
    ) -> Result<Self> {
        let mut classes = BTreeMap::new();
        for (id, p) in &per_station {
            classes.insert(id.as_str(), classify(p.true_vs30, bounds)?);
        }
        let per_site_class = SiteClass::REPORT_ORDER
            .iter()
            .map(|&class| ClassRow {
                class,
                summary: summarize(
                    per_station
                        .iter()
                        .filter(|(id, _)| classes[id.as_str()] == class)
                        .map(|(_, p)| p),
                ),
            })
            .collect();
        let ratios: Vec<f64> = per_station.values().map(StationPrediction::log_ratio).collect();
        Ok(Self {
            per_site_class,
            total: summarize(per_station.values()),
            log_ratio: log_ratio_stats(&ratios),
            aggregation: STATION_AGGREGATION.to_string(),
            per_station,
        })
    }

    pub fn class(&self, class: SiteClass) -> &ErrorSummary {
        &self
            .per_site_class
            .iter()
            .find(|r| r.class == class)
            .expect("all classes are present")
            .summary
    }
}

/// `None` prints as `NaN`, as in published site-class tables.
pub fn fmt_opt(v: Option<f64>, decimals: usize) -> String {
    match v {
        Some(v) => format!("{v:.decimals$}"),
        None => "NaN".into(),
    }
}

/// Rows `experiment,class,station_count,abs_mean_error_pct`, classes A to E
/// then `Total`.
pub fn table_rows(experiment: &str, report: &MetricsReport) -> Vec<String> {
    let mut rows: Vec<String> = report
        .per_site_class
        .iter()
        .map(|r| {
            format!(
                "{experiment},{},{},{}",
                r.class,
                r.summary.station_count,
                fmt_opt(r.summary.abs_mean_error_pct, 4)
            )
        })
        .collect();
    rows.push(format!(
        "{experiment},Total,{},{}",
        report.total.station_count,
        fmt_opt(report.total.abs_mean_error_pct, 4)
    ));
    rows
}

pub const TABLE_HEADER: &str = "experiment,class,station_count,abs_mean_error_pct";

#[cfg(test)]
mod tests {
    use super::*;

    fn sp(t: f64, p: f64) -> StationPrediction {
        StationPrediction {
            true_vs30: t,
            predicted_vs30: p,
            record_count: 1,
        }
    }

    #[test]
    fn single_station_example() {
        let per: BTreeMap<_, _> = [("s".to_string(), sp(400.0, 300.0))].into();
        let m = MetricsReport::from_predictions(per, &ClassBoundaries::default()).unwrap();
        assert!((m.class(SiteClass::C).abs_mean_error_pct.unwrap() - 25.0).abs() < 1e-12);
        assert_eq!(m.total.abs_mean_error_pct, m.class(SiteClass::C).abs_mean_error_pct);
        assert!((m.log_ratio.log_ratio_mean.unwrap() - 0.75f64.log10()).abs() < 1e-12);
        assert_eq!(m.class(SiteClass::A).station_count, 0);
        assert_eq!(m.class(SiteClass::A).abs_mean_error_pct, None);
        let rows = table_rows("x", &m);
        assert_eq!(rows[0], "x,A,0,NaN");
        assert_eq!(rows[5], "x,Total,1,25.0000");
    }

    #[test]
    fn log_ratio_pair() {
        let s = log_ratio_stats(&[0.1, -0.1]);
        assert!(s.log_ratio_mean.unwrap().abs() < 1e-15);
        assert!((s.abs_log_ratio_mean.unwrap() - 0.1).abs() < 1e-15);
        assert!(s.abs_log_ratio_std.unwrap().abs() < 1e-15);
        assert_eq!(log_ratio_stats(&[]), LogRatioStats::default());
    }

    #[test]
    fn json_prints_empty_class_as_null() {
        let per: BTreeMap<_, _> = [("s".to_string(), sp(400.0, 400.0))].into();
        let m = MetricsReport::from_predictions(per, &ClassBoundaries::default()).unwrap();
        let v = serde_json::to_value(&m).unwrap();
        assert_eq!(v["per_site_class"][0]["class"], "A");
        assert!(v["per_site_class"][0]["abs_mean_error_pct"].is_null());
        assert_eq!(v["abs_log_ratio_std"], 0.0);
        let back: MetricsReport = serde_json::from_value(v).unwrap();
        assert_eq!(back, m);
    }
}
