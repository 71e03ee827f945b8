//! Desk-scale synthetic strong-motion dataset.
//!
//! Each record is background noise plus a P phase (weak, high-frequency,
//! strongest on the vertical) and an S phase (strong, broadband excitation
//! filtered through a damped oscillator at the site frequency
//! `f0 = vs30 / 120`, strongest on the horizontals). Onset indices are stored
//! as the manual picks.
//!
//! Stations are laid out in four geographic regions with region-specific
//! geology and lithology codes, so regional clustering has a known answer.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{quarter_wavelength_f0, Dataset, StationMeta, StrongMotionRecord};
use crate::error::{Error, Result};

pub const VS30_RANGE: (f64, f64) = (180.0, 1500.0);
/// Shortest record the generator accepts; P, S and the coda must fit.
pub const MIN_DURATION_S: f64 = 10.0;
/// Minimum P-to-S separation.
pub const ONSET_SPACING_S: f64 = 1.0;

const SITE_DAMPING: f64 = 0.05;
const P_FREQ_HZ: f64 = 18.0;
const P_DAMPING: f64 = 0.2;
const P_REL_AMP: f64 = 0.12;
const NOISE_REL_AMP: f64 = 0.002;

/// (latitude, longitude, geology base, lithology base) per region.
const REGIONS: [(f64, f64, u32, u32); 4] = [
    (40.8, 29.5, 1, 2),
    (38.3, 27.3, 4, 6),
    (39.9, 39.8, 7, 10),
    (37.2, 35.8, 10, 14),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_stations: usize,
    pub records_per_station: usize,
    pub duration_s: f64,
    pub sample_rate: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            n_stations: 40,
            records_per_station: 3,
            duration_s: 60.0,
            sample_rate: 100.0,
        }
    }
}

/// Discretized damped oscillator (two-pole resonator) at `freq`.
struct Resonator {
    a1: f64,
    a2: f64,
    gain: f64,
    y1: f64,
    y2: f64,
}

impl Resonator {
    fn new(freq: f64, damping: f64, sample_rate: f64) -> Self {
        let w0 = 2.0 * std::f64::consts::PI * freq / sample_rate;
        let r = (-damping * w0).exp();
        let wd = w0 * (1.0 - damping * damping).sqrt();
        Self {
            a1: 2.0 * r * wd.cos(),
            a2: -r * r,
            gain: 1.0 - r,
            y1: 0.0,
            y2: 0.0,
        }
    }

    fn step(&mut self, x: f64) -> f64 {
        let y = self.gain * x + self.a1 * self.y1 + self.a2 * self.y2;
        self.y2 = self.y1;
        self.y1 = y;
        y
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Envelope-modulated white noise through a resonator, scaled to unit peak.
fn phase_burst(
    rng: &mut ChaCha8Rng,
    n: usize,
    onset: usize,
    sample_rate: f64,
    freq: f64,
    damping: f64,
    envelope: impl Fn(f64) -> f64,
) -> Vec<f64> {
    let mut res = Resonator::new(freq, damping, sample_rate);
    let mut out = vec![0.0; n];
    for (i, o) in out.iter_mut().enumerate().skip(onset) {
        let t = (i - onset) as f64 / sample_rate;
        *o = res.step(envelope(t) * normal(rng));
    }
    let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        out.iter_mut().for_each(|v| *v /= peak);
    }
    out
}

fn noise(rng: &mut ChaCha8Rng, n: usize, sample_rate: f64) -> Vec<f64> {
    // one-pole low-pass at 20 Hz
    let a = (-2.0 * std::f64::consts::PI * 20.0 / sample_rate).exp();
    let mut y = 0.0;
    (0..n)
        .map(|_| {
            y = a * y + (1.0 - a) * normal(rng);
            y
        })
        .collect()
}

fn synth_record(
    rng: &mut ChaCha8Rng,
    record_id: String,
    station: &StationMeta,
    cfg: &SynthConfig,
) -> StrongMotionRecord {
    let fs = cfg.sample_rate;
    let n = (cfg.duration_s * fs).round() as usize;
    let duration = n as f64 / fs;
    let vs30 = station.vs30.expect("synthetic stations are labeled");
    let f0 = quarter_wavelength_f0(vs30);

    let magnitude: f64 = rng.random_range(3.0..6.0);
    let peak = 20.0 * 10f64.powf(0.5 * (magnitude - 3.0));

    // P after a full default LTA window when the record allows it
    let p_min = (0.2 * duration).max(6.0f64.min(0.3 * duration));
    let p_time = p_min + rng.random_range(0.0..0.1 * duration);
    let sp = rng
        .random_range(2.0..5.0f64)
        .min(0.25 * (duration - p_time))
        .max(ONSET_SPACING_S);
    let p_idx = (p_time * fs).round() as usize;
    let s_idx = ((p_time + sp) * fs).round() as usize;
    let rise = rng.random_range(1.0..2.5f64);
    let s_env = move |t: f64| (t / rise) * (1.0 - t / rise).exp();
    let p_env = |t: f64| (-t / 1.5).exp();

    let mut channels: [Vec<f64>; 3] = Default::default();
    // E-W, N-S, U-D
    let s_scale = [1.0, rng.random_range(0.7..1.0), rng.random_range(0.3..0.5)];
    let p_scale = [0.3, 0.3, 1.0];
    for (c, ch) in channels.iter_mut().enumerate() {
        let s = phase_burst(rng, n, s_idx, fs, f0, SITE_DAMPING, s_env);
        let p = phase_burst(rng, n, p_idx, fs, P_FREQ_HZ, P_DAMPING, p_env);
        let bg = noise(rng, n, fs);
        *ch = (0..n)
            .map(|i| {
                let v = peak
                    * (s_scale[c] * s[i] + P_REL_AMP * p_scale[c] * p[i] + NOISE_REL_AMP * bg[i]);
                v as f32 as f64
            })
            .collect();
    }
    StrongMotionRecord {
        record_id,
        station_id: station.station_id.clone(),
        sample_rate: fs,
        channels,
        origin_time: Some(1.5e9 + rng.random_range(0.0..1.5e8f64).floor()),
        magnitude: Some((magnitude * 10.0).round() / 10.0),
        p_arrival_manual: Some(p_idx),
        s_arrival_manual: Some(s_idx),
    }
}

/// One record for a given labeled station, seeded by `cfg.seed`. Sample
/// count, rate and length follow `cfg`; station counts are ignored.
pub fn synthesize_record(station: &StationMeta, record_id: &str, cfg: &SynthConfig) -> Result<StrongMotionRecord> {
    if !station.vs30.is_some_and(|v| v > 0.0) {
        return Err(Error::InvalidStation {
            station_id: station.station_id.clone(),
            message: "synthetic records need a positive Vs30".into(),
        });
    }
    if !(cfg.sample_rate.is_finite() && cfg.sample_rate > 0.0 && cfg.duration_s >= MIN_DURATION_S) {
        return Err(Error::Config(format!(
            "need a positive sample rate and at least {MIN_DURATION_S} s of record"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    Ok(synth_record(&mut rng, record_id.to_string(), station, cfg))
}

/// Generates a deterministic dataset from `cfg.seed`.
pub fn synthesize_dataset(cfg: &SynthConfig) -> Result<Dataset> {
    if cfg.n_stations == 0 || cfg.records_per_station == 0 {
        return Err(Error::Config("station and record counts must be at least 1".into()));
    }
    if !(cfg.sample_rate.is_finite() && cfg.sample_rate > 0.0) {
        return Err(Error::Config(format!("sample_rate must be positive, got {}", cfg.sample_rate)));
    }
    if !(cfg.duration_s >= MIN_DURATION_S) {
        return Err(Error::Config(format!(
            "synthetic records need at least {MIN_DURATION_S} s, got {}",
            cfg.duration_s
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let jitter = Normal::new(0.0, 0.35).unwrap();
    let stations: Vec<StationMeta> = (0..cfg.n_stations)
        .map(|i| {
            let (lat, lon, geo, lith) = REGIONS[i % REGIONS.len()];
            StationMeta {
                station_id: format!("ST{i:03}"),
                latitude: lat + jitter.sample(&mut rng),
                longitude: lon + jitter.sample(&mut rng),
                vs30: Some(rng.random_range(VS30_RANGE.0..VS30_RANGE.1)),
                geology_code: geo + rng.random_range(0..2),
                lithology_code: lith + rng.random_range(0..2),
            }
        })
        .collect();
    let mut records = Vec::with_capacity(cfg.n_stations * cfg.records_per_station);
    for st in &stations {
        for j in 0..cfg.records_per_station {
            let id = format!("{}_R{j:02}", st.station_id);
            records.push(synth_record(&mut rng, id, st, cfg));
        }
    }
    Dataset::new(stations, records)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            seed: 1,
            n_stations: 4,
            records_per_station: 2,
            duration_s: 30.0,
            sample_rate: 100.0,
        }
    }

    #[test]
    fn counts_and_determinism() {
        let a = synthesize_dataset(&small()).unwrap();
        let b = synthesize_dataset(&small()).unwrap();
        assert_eq!(a.stations().len(), 4);
        assert_eq!(a.records().len(), 8);
        assert_eq!(a, b);
        let c = synthesize_dataset(&SynthConfig { seed: 2, ..small() }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn picks_precede_peak() {
        let ds = synthesize_dataset(&SynthConfig {
            n_stations: 12,
            records_per_station: 3,
            ..small()
        })
        .unwrap();
        for r in ds.records() {
            let (p, s) = (r.p_arrival_manual.unwrap(), r.s_arrival_manual.unwrap());
            let peak = crate::preprocess::pga_index(r);
            assert!(p < s && s < peak, "{}: p={p} s={s} pga={peak}", r.record_id);
        }
    }

    #[test]
    fn vs30_in_range_and_samples_are_f32_exact() {
        let ds = synthesize_dataset(&small()).unwrap();
        for s in ds.stations().values() {
            let v = s.vs30.unwrap();
            assert!((VS30_RANGE.0..VS30_RANGE.1).contains(&v));
        }
        for r in ds.records() {
            assert!(r.channels.iter().flatten().all(|&v| v as f32 as f64 == v));
        }
    }

    #[test]
    fn rejects_bad_counts() {
        assert!(synthesize_dataset(&SynthConfig { n_stations: 0, ..small() }).is_err());
        assert!(synthesize_dataset(&SynthConfig { records_per_station: 0, ..small() }).is_err());
        assert!(synthesize_dataset(&SynthConfig { duration_s: 5.0, ..small() }).is_err());
    }
}
