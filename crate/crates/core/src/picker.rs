//! P/S arrival annotations: manual picks from CSV and automatic picks from a
//! classic STA/LTA trigger.
//!
//! The P detector runs on the vertical channel's energy, the S detector on
//! the horizontal vector-sum energy. Both use trailing (causal) moving
//! averages ending at the current sample; the ratio is only evaluated once a
//! full LTA window is available and the LTA is nonzero.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, PickIssue, Result};
use crate::preprocess::AnnotationSource;
use crate::signal_store::{Dataset, StrongMotionRecord, EAST, NORTH, VERTICAL};

/// Noise-power floor for the SNR estimate, in gal².
const SNR_NOISE_FLOOR: f64 = 1e-20;
const SNR_WINDOW_S: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PickResult {
    pub record_id: String,
    pub p_idx: usize,
    pub s_idx: usize,
    pub snr_db: f64,
    pub source: AnnotationSource,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StaLtaParams {
    pub sta_s: f64,
    pub lta_s: f64,
    pub trigger_ratio: f64,
}

impl Default for StaLtaParams {
    fn default() -> Self {
        Self {
            sta_s: 0.5,
            lta_s: 5.0,
            trigger_ratio: 4.0,
        }
    }
}

/// STA/LTA ratio per sample; `None` where it is undefined.
pub fn sta_lta_ratio(energy: &[f64], n_sta: usize, n_lta: usize) -> Vec<Option<f64>> {
    let mut prefix = Vec::with_capacity(energy.len() + 1);
    prefix.push(0.0);
    let mut acc = 0.0;
    for e in energy {
        acc += e;
        prefix.push(acc);
    }
    (0..energy.len())
        .map(|i| {
            if i + 1 < n_lta {
                return None;
            }
            let lta = (prefix[i + 1] - prefix[i + 1 - n_lta]) / n_lta as f64;
            if lta <= 0.0 {
                return None;
            }
            let sta = (prefix[i + 1] - prefix[i + 1 - n_sta]) / n_sta as f64;
            Some(sta / lta)
        })
        .collect()
}

fn mean_square(x: &[f64]) -> f64 {
    if x.is_empty() {
        0.0
    } else {
        x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64
    }
}

pub fn sta_lta_pick(record: &StrongMotionRecord, params: &StaLtaParams) -> Result<PickResult> {
    if !(params.sta_s > 0.0 && params.lta_s > params.sta_s) {
        return Err(Error::Config(format!(
            "STA/LTA needs lta_s > sta_s > 0, got sta {} lta {}",
            params.sta_s, params.lta_s
        )));
    }
    let fs = record.sample_rate;
    let n_sta = ((params.sta_s * fs).round() as usize).max(1);
    let n_lta = ((params.lta_s * fs).round() as usize).max(n_sta + 1);
    if record.len() <= n_lta {
        return Err(Error::InvalidRecord {
            record_id: record.record_id.clone(),
            message: format!("record of {} samples is not longer than the LTA window", record.len()),
        });
    }
    let trig = params.trigger_ratio;

    let vert: Vec<f64> = record.channels[VERTICAL].iter().map(|v| v * v).collect();
    let p_idx = sta_lta_ratio(&vert, n_sta, n_lta)
        .iter()
        .position(|r| r.is_some_and(|r| r > trig))
        .ok_or_else(|| Error::NoTrigger(record.record_id.clone()))?;

    // The P phase usually trips the horizontal detector too, so S is the
    // first re-trigger after the ratio has fallen back below the threshold.
    let horiz: Vec<f64> = record.channels[EAST]
        .iter()
        .zip(&record.channels[NORTH])
        .map(|(e, n)| e * e + n * n)
        .collect();
    let ratio_h = sta_lta_ratio(&horiz, n_sta, n_lta);
    let above = |i: usize| ratio_h[i].is_some_and(|r| r > trig);
    let s_idx = (p_idx + 1..record.len())
        .find(|&i| above(i) && !above(i - 1))
        .ok_or_else(|| Error::NoTrigger(record.record_id.clone()))?;

    let w = (SNR_WINDOW_S * fs).round() as usize;
    let ch = &record.channels[VERTICAL];
    let signal = mean_square(&ch[p_idx..(p_idx + w).min(ch.len())]);
    let noise = mean_square(&ch[p_idx.saturating_sub(w)..p_idx]).max(SNR_NOISE_FLOOR);
    Ok(PickResult {
        record_id: record.record_id.clone(),
        p_idx,
        s_idx,
        snr_db: 10.0 * (signal.max(SNR_NOISE_FLOOR) / noise).log10(),
        source: AnnotationSource::Auto,
    })
}

/// Picks for every record that triggers, plus the ids of those that did not.
pub fn auto_pick_dataset(dataset: &Dataset, params: &StaLtaParams) -> Result<(Vec<PickResult>, Vec<String>)> {
    let mut picks = Vec::new();
    let mut failed = Vec::new();
    for r in dataset.records() {
        match sta_lta_pick(r, params) {
            Ok(p) => picks.push(p),
            Err(Error::NoTrigger(id)) => failed.push(id),
            Err(Error::InvalidRecord { record_id, .. }) => failed.push(record_id),
            Err(e) => return Err(e),
        }
    }
    Ok((picks, failed))
}

/// Manual picks carried on the records themselves.
pub fn manual_picks_from_dataset(dataset: &Dataset) -> Vec<PickResult> {
    dataset
        .records()
        .iter()
        .filter_map(|r| match (r.p_arrival_manual, r.s_arrival_manual) {
            (Some(p), Some(s)) => Some(PickResult {
                record_id: r.record_id.clone(),
                p_idx: p,
                s_idx: s,
                snr_db: manual_snr(r, p),
                source: AnnotationSource::Manual,
            }),
            _ => None,
        })
        .collect()
}

fn manual_snr(record: &StrongMotionRecord, p: usize) -> f64 {
    let w = (SNR_WINDOW_S * record.sample_rate).round() as usize;
    let ch = &record.channels[VERTICAL];
    let signal = mean_square(&ch[p..(p + w).min(ch.len())]).max(SNR_NOISE_FLOOR);
    let noise = mean_square(&ch[p.saturating_sub(w)..p]).max(SNR_NOISE_FLOOR);
    10.0 * (signal / noise).log10()
}

#[derive(Debug, Deserialize)]
struct PickRow {
    record_id: String,
    p_idx: usize,
    s_idx: usize,
}

/// Reads a `record_id,p_idx,s_idx` CSV and validates every row against
/// `dataset`. Row numbers in errors count the header as line 1.
pub fn load_manual_picks(path: &Path, dataset: &Dataset) -> Result<Vec<PickResult>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let headers = reader
        .headers()
        .map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    if headers.iter().take(3).collect::<Vec<_>>() != ["record_id", "p_idx", "s_idx"] {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: format!("expected header record_id,p_idx,s_idx, got {headers:?}"),
        });
    }
    let mut out = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line,
            message: e.to_string(),
        })?;
        let row: PickRow = row.deserialize(Some(&headers)).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line,
            message: e.to_string(),
        })?;
        let invalid = |issue| Error::InvalidPick {
            path: path.to_path_buf(),
            line,
            record_id: row.record_id.clone(),
            issue,
        };
        let Some(record) = dataset.record(&row.record_id) else {
            return Err(invalid(PickIssue::UnknownRecord));
        };
        if row.p_idx >= row.s_idx {
            return Err(invalid(PickIssue::Ordering));
        }
        if row.s_idx >= record.len() {
            return Err(invalid(PickIssue::OutOfRange));
        }
        out.push(PickResult {
            snr_db: manual_snr(record, row.p_idx),
            record_id: row.record_id,
            p_idx: row.p_idx,
            s_idx: row.s_idx,
            source: AnnotationSource::Manual,
        });
    }
    Ok(out)
}

/// Writes picks as CSV; `extended` adds the `snr_db,source` columns.
pub fn write_picks_csv(path: &Path, picks: &[PickResult], extended: bool) -> Result<()> {
    let mut s = String::from("record_id,p_idx,s_idx");
    if extended {
        s.push_str(",snr_db,source");
    }
    s.push('\n');
    for p in picks {
        s.push_str(&format!("{},{},{}", p.record_id, p.p_idx, p.s_idx));
        if extended {
            s.push_str(&format!(",{:.3},{}", p.snr_db, p.source.short()));
        }
        s.push('\n');
    }
    crate::fsutil::write_atomic(path, s.as_bytes())
}

/// Picks indexed by record id, per annotation source.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PickSet {
    manual: BTreeMap<String, PickResult>,
    auto: BTreeMap<String, PickResult>,
    /// Records the automatic picker could not annotate.
    pub auto_failures: Vec<String>,
}

impl PickSet {
    pub fn new(manual: Vec<PickResult>, auto: Vec<PickResult>) -> Self {
        Self {
            manual: manual.into_iter().map(|p| (p.record_id.clone(), p)).collect(),
            auto: auto.into_iter().map(|p| (p.record_id.clone(), p)).collect(),
            auto_failures: Vec::new(),
        }
    }

    /// Manual picks from the records, automatic picks from STA/LTA.
    pub fn from_dataset(dataset: &Dataset, params: &StaLtaParams) -> Result<Self> {
        let (auto, failed) = auto_pick_dataset(dataset, params)?;
        let mut set = Self::new(manual_picks_from_dataset(dataset), auto);
        set.auto_failures = failed;
        Ok(set)
    }

    pub fn get(&self, source: AnnotationSource, record_id: &str) -> Option<&PickResult> {
        match source {
            AnnotationSource::Manual => self.manual.get(record_id),
            AnnotationSource::Auto => self.auto.get(record_id),
        }
    }

    pub fn count(&self, source: AnnotationSource) -> usize {
        match source {
            AnnotationSource::Manual => self.manual.len(),
            AnnotationSource::Auto => self.auto.len(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal_store::{synthesize_dataset, SynthConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn record_from(ch: [Vec<f64>; 3]) -> StrongMotionRecord {
        StrongMotionRecord {
            record_id: "r1".into(),
            station_id: "s".into(),
            sample_rate: 100.0,
            channels: ch,
            origin_time: None,
            magnitude: None,
            p_arrival_manual: None,
            s_arrival_manual: None,
        }
    }

    fn white(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
    }

    #[test]
    fn white_noise_never_triggers_at_ten() {
        let r = record_from([white(6000, 1), white(6000, 2), white(6000, 3)]);
        let params = StaLtaParams {
            trigger_ratio: 10.0,
            ..StaLtaParams::default()
        };
        assert!(matches!(sta_lta_pick(&r, &params), Err(Error::NoTrigger(_))));
    }

    #[test]
    fn step_onset_picked_within_one_sta_window() {
        let n = 3000;
        let step = 1200;
        let mut v = white(n, 7).iter().map(|x| 0.01 * x).collect::<Vec<_>>();
        v[step..].iter_mut().for_each(|x| *x += 1.0);
        let mut h = white(n, 8).iter().map(|x| 0.01 * x).collect::<Vec<_>>();
        h[2000..].iter_mut().for_each(|x| *x += 1.0);
        let r = record_from([h.clone(), h, v]);
        let pick = sta_lta_pick(&r, &StaLtaParams::default()).unwrap();
        assert!(pick.p_idx >= step && pick.p_idx < step + 50, "{}", pick.p_idx);
        assert!(pick.s_idx > pick.p_idx);
        assert!(pick.snr_db > 20.0);
    }

    #[test]
    fn no_pick_inside_all_zero_prefix() {
        let n = 2000;
        let mut v = vec![0.0; n];
        let w = white(n - 900, 3);
        v[900..].copy_from_slice(&w);
        let mut h = vec![0.0; n];
        h[1500..].iter_mut().for_each(|x| *x = 5.0);
        let r = record_from([h.clone(), h, v]);
        let pick = sta_lta_pick(&r, &StaLtaParams::default()).unwrap();
        assert_eq!(pick.p_idx, 900);
        assert_eq!(pick.s_idx, 1500);
    }

    #[test]
    fn rejects_bad_windows() {
        let r = record_from([vec![1.0; 100], vec![1.0; 100], vec![1.0; 100]]);
        let bad = StaLtaParams {
            sta_s: 2.0,
            lta_s: 1.0,
            trigger_ratio: 3.0,
        };
        assert!(matches!(sta_lta_pick(&r, &bad), Err(Error::Config(_))));
        assert!(matches!(
            sta_lta_pick(&r, &StaLtaParams::default()),
            Err(Error::InvalidRecord { .. })
        ));
    }

    #[test]
    fn synthetic_auto_picks_agree_with_onsets() {
        let ds = synthesize_dataset(&SynthConfig {
            seed: 11,
            n_stations: 25,
            records_per_station: 4,
            duration_s: 30.0,
            sample_rate: 100.0,
        })
        .unwrap();
        let (picks, failed) = auto_pick_dataset(&ds, &StaLtaParams::default()).unwrap();
        let tol = (0.5 * 100.0) as usize;
        let good = picks
            .iter()
            .filter(|p| {
                let truth = ds.record(&p.record_id).unwrap().p_arrival_manual.unwrap();
                p.p_idx.abs_diff(truth) <= tol
            })
            .count();
        assert!(good * 10 >= 9 * ds.records().len(), "good {good}, failed {}", failed.len());
    }

    #[test]
    fn picks_are_deterministic() {
        let ds = synthesize_dataset(&SynthConfig {
            seed: 3,
            n_stations: 3,
            records_per_station: 2,
            duration_s: 30.0,
            sample_rate: 100.0,
        })
        .unwrap();
        let a = auto_pick_dataset(&ds, &StaLtaParams::default()).unwrap();
        let b = auto_pick_dataset(&ds, &StaLtaParams::default()).unwrap();
        assert_eq!(a, b);
    }

    fn dataset_with_r1() -> Dataset {
        let mut r = record_from([vec![0.0; 6000], vec![0.0; 6000], vec![0.0; 6000]]);
        r.station_id = "S".into();
        Dataset::new(
            vec![crate::signal_store::StationMeta {
                station_id: "S".into(),
                latitude: 0.0,
                longitude: 0.0,
                vs30: Some(300.0),
                geology_code: 0,
                lithology_code: 0,
            }],
            vec![r],
        )
        .unwrap()
    }

    #[test]
    fn manual_csv_validation() {
        let ds = dataset_with_r1();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.csv");

        std::fs::write(&path, "record_id,p_idx,s_idx\nr1,100,300\n").unwrap();
        let picks = load_manual_picks(&path, &ds).unwrap();
        assert_eq!(picks.len(), 1);
        assert_eq!((picks[0].p_idx, picks[0].s_idx), (100, 300));
        assert_eq!(picks[0].source, AnnotationSource::Manual);

        std::fs::write(&path, "record_id,p_idx,s_idx\nr1,300,100\n").unwrap();
        assert!(matches!(
            load_manual_picks(&path, &ds),
            Err(Error::InvalidPick { issue: PickIssue::Ordering, line: 2, .. })
        ));

        std::fs::write(&path, "record_id,p_idx,s_idx\nr1,1,2\nzzz,1,2\n").unwrap();
        assert!(matches!(
            load_manual_picks(&path, &ds),
            Err(Error::InvalidPick { issue: PickIssue::UnknownRecord, line: 3, .. })
        ));

        std::fs::write(&path, "record_id,p_idx,s_idx\nr1,1,6000\n").unwrap();
        assert!(matches!(
            load_manual_picks(&path, &ds),
            Err(Error::InvalidPick { issue: PickIssue::OutOfRange, .. })
        ));

        std::fs::write(&path, "record_id,p_idx,s_idx\nr1,1,2\nr1,abc,4\n").unwrap();
        assert!(matches!(load_manual_picks(&path, &ds), Err(Error::Parse { line: 3, .. })));
    }

    #[test]
    fn csv_export_reloads() {
        let ds = dataset_with_r1();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("auto.csv");
        let picks = vec![PickResult {
            record_id: "r1".into(),
            p_idx: 10,
            s_idx: 20,
            snr_db: 12.5,
            source: AnnotationSource::Auto,
        }];
        write_picks_csv(&path, &picks, true).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "record_id,p_idx,s_idx,snr_db,source\nr1,10,20,12.500,auto\n");
        let back = load_manual_picks(&path, &ds).unwrap();
        assert_eq!((back[0].p_idx, back[0].s_idx), (10, 20));
    }
}
