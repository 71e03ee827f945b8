//! Strong-motion records, station metadata, and datasets.
//!
//! Accelerations are in cm/s² (gal). A [`Dataset`] is validated on
//! construction and immutable afterwards.

mod manifest;
mod synth;

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use manifest::{load_dataset, write_dataset, ChannelStorage};
pub use synth::{synthesize_dataset, synthesize_record, SynthConfig, ONSET_SPACING_S};

/// Shear-wave velocity of the stiff layer above which the generator places
/// its quarter-wavelength resonance: `f0 = vs30 / (4 · 30 m)`.
pub fn quarter_wavelength_f0(vs30: f64) -> f64 {
    vs30 / 120.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationMeta {
    pub station_id: String,
    pub latitude: f64,
    pub longitude: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vs30: Option<f64>,
    pub geology_code: u32,
    pub lithology_code: u32,
}

impl StationMeta {
    pub fn validate(&self) -> Result<()> {
        let bad = |message: String| Error::InvalidStation {
            station_id: self.station_id.clone(),
            message,
        };
        if !(-90.0..=90.0).contains(&self.latitude) {
            return Err(bad(format!("latitude {} outside [-90, 90]", self.latitude)));
        }
        if !(-180.0..=180.0).contains(&self.longitude) {
            return Err(bad(format!("longitude {} outside [-180, 180]", self.longitude)));
        }
        if let Some(v) = self.vs30 {
            if !(v.is_finite() && v > 0.0) {
                return Err(bad(format!("vs30 must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

/// Channel order: E-W, N-S, U-D.
pub const EAST: usize = 0;
pub const NORTH: usize = 1;
pub const VERTICAL: usize = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct StrongMotionRecord {
    pub record_id: String,
    pub station_id: String,
    pub sample_rate: f64,
    pub channels: [Vec<f64>; 3],
    pub origin_time: Option<f64>,
    pub magnitude: Option<f64>,
    pub p_arrival_manual: Option<usize>,
    pub s_arrival_manual: Option<usize>,
}

impl StrongMotionRecord {
    pub fn len(&self) -> usize {
        self.channels[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.channels[0].is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.len() as f64 / self.sample_rate
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |message: String| Error::InvalidRecord {
            record_id: self.record_id.clone(),
            message,
        };
        let n = self.channels[0].len();
        if n == 0 {
            return Err(bad("channels are empty".into()));
        }
        if self.channels.iter().any(|c| c.len() != n) {
            let lens: Vec<usize> = self.channels.iter().map(Vec::len).collect();
            return Err(bad(format!("channels have unequal lengths {lens:?}")));
        }
        if !(self.sample_rate.is_finite() && self.sample_rate > 0.0) {
            return Err(bad(format!("sample_rate must be positive, got {}", self.sample_rate)));
        }
        if self.channels.iter().flatten().any(|v| !v.is_finite()) {
            return Err(bad("non-finite sample".into()));
        }
        match (self.p_arrival_manual, self.s_arrival_manual) {
            (Some(p), Some(s)) if !(p < s && s < n) => {
                return Err(bad(format!("picks must satisfy p < s < {n}, got p={p} s={s}")))
            }
            (Some(i), None) | (None, Some(i)) if i >= n => {
                return Err(bad(format!("pick {i} outside record of {n} samples")))
            }
            _ => {}
        }
        Ok(())
    }

    /// Largest absolute sample value across all channels.
    pub fn peak_abs(&self) -> f64 {
        self.channels
            .iter()
            .flatten()
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    stations: BTreeMap<String, StationMeta>,
    records: Vec<StrongMotionRecord>,
}

impl Dataset {
    pub fn new(stations: Vec<StationMeta>, records: Vec<StrongMotionRecord>) -> Result<Self> {
        let mut map = BTreeMap::new();
        for s in stations {
            s.validate()?;
            if map.contains_key(&s.station_id) {
                return Err(Error::InvalidStation {
                    station_id: s.station_id.clone(),
                    message: "duplicate station id".into(),
                });
            }
            map.insert(s.station_id.clone(), s);
        }
        let mut seen = HashSet::new();
        for r in &records {
            if !seen.insert(r.record_id.as_str()) {
                return Err(Error::InvalidRecord {
                    record_id: r.record_id.clone(),
                    message: "duplicate record id".into(),
                });
            }
            if !map.contains_key(&r.station_id) {
                return Err(Error::UnknownStation {
                    record_id: r.record_id.clone(),
                    station_id: r.station_id.clone(),
                });
            }
            r.validate()?;
        }
        Ok(Self {
            stations: map,
            records,
        })
    }

    pub fn stations(&self) -> &BTreeMap<String, StationMeta> {
        &self.stations
    }

    pub fn station(&self, id: &str) -> Option<&StationMeta> {
        self.stations.get(id)
    }

    pub fn records(&self) -> &[StrongMotionRecord] {
        &self.records
    }

    pub fn record(&self, id: &str) -> Option<&StrongMotionRecord> {
        self.records.iter().find(|r| r.record_id == id)
    }

    /// Stations with a measured Vs30, in id order.
    pub fn labeled_stations(&self) -> impl Iterator<Item = &StationMeta> {
        self.stations.values().filter(|s| s.vs30.is_some())
    }

    /// Vs30 of the record's station, if measured.
    pub fn record_vs30(&self, record: &StrongMotionRecord) -> Option<f64> {
        self.stations.get(&record.station_id).and_then(|s| s.vs30)
    }

    /// Records of `station_id`, in dataset order.
    pub fn records_of<'a>(&'a self, station_id: &'a str) -> impl Iterator<Item = &'a StrongMotionRecord> {
        self.records.iter().filter(move |r| r.station_id == station_id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn station(id: &str, vs30: Option<f64>) -> StationMeta {
        StationMeta {
            station_id: id.into(),
            latitude: 39.0,
            longitude: 32.0,
            vs30,
            geology_code: 1,
            lithology_code: 2,
        }
    }

    pub(crate) fn record(id: &str, station: &str, n: usize) -> StrongMotionRecord {
        StrongMotionRecord {
            record_id: id.into(),
            station_id: station.into(),
            sample_rate: 100.0,
            channels: [vec![0.0; n], vec![0.0; n], vec![0.0; n]],
            origin_time: None,
            magnitude: None,
            p_arrival_manual: None,
            s_arrival_manual: None,
        }
    }

    #[test]
    fn valid_dataset_constructs() {
        let ds = Dataset::new(
            vec![station("A", Some(300.0)), station("B", None)],
            vec![record("r1", "A", 10), record("r2", "A", 10), record("r3", "B", 5)],
        )
        .unwrap();
        assert_eq!(ds.stations().len(), 2);
        assert_eq!(ds.records().len(), 3);
        assert_eq!(ds.labeled_stations().count(), 1);
    }

    #[test]
    fn unknown_station_is_named() {
        let err = Dataset::new(vec![station("A", None)], vec![record("r1", "X", 3)]).unwrap_err();
        assert!(err.to_string().contains('X'), "{err}");
    }

    #[test]
    fn unequal_channels_name_the_record() {
        let mut r = record("bad_rec", "A", 4);
        r.channels[2].pop();
        let err = Dataset::new(vec![station("A", None)], vec![r]).unwrap_err();
        assert!(err.to_string().contains("bad_rec"), "{err}");
    }

    #[test]
    fn invariants_are_enforced() {
        let mut s = station("A", Some(-1.0));
        assert!(s.validate().is_err());
        s.vs30 = Some(200.0);
        s.latitude = 95.0;
        assert!(s.validate().is_err());

        let mut r = record("r", "A", 10);
        r.p_arrival_manual = Some(5);
        r.s_arrival_manual = Some(5);
        assert!(r.validate().is_err());
        r.s_arrival_manual = Some(10);
        assert!(r.validate().is_err());
        r.s_arrival_manual = Some(9);
        assert!(r.validate().is_ok());
        r.sample_rate = 0.0;
        assert!(r.validate().is_err());
        assert!(record("e", "A", 0).validate().is_err());
    }
}
