use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Dataset, StationMeta, StrongMotionRecord};
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    stations: Vec<StationMeta>,
    records: Vec<RecordEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordEntry {
    record_id: String,
    station_id: String,
    sample_rate: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    channels: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    data_file: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    origin_time: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    magnitude: Option<f64>,
    #[serde(default, alias = "p_arrival_manual", skip_serializing_if = "Option::is_none")]
    p_arrival_manual_idx: Option<usize>,
    #[serde(default, alias = "s_arrival_manual", skip_serializing_if = "Option::is_none")]
    s_arrival_manual_idx: Option<usize>,
}

/// How [`write_dataset`] stores samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChannelStorage {
    /// JSON arrays inside the manifest.
    Inline,
    /// One little-endian f32 `[3 × n]` channel-major file per record under
    /// `data/` next to the manifest. Samples are rounded to f32.
    Binary,
}

fn read_channel_file(path: &Path, record_id: &str) -> Result<[Vec<f64>; 3]> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.is_empty() || bytes.len() % 12 != 0 {
        return Err(Error::InvalidRecord {
            record_id: record_id.into(),
            message: format!(
                "{}: {} bytes is not a whole [3 x n] f32 array",
                path.display(),
                bytes.len()
            ),
        });
    }
    let n = bytes.len() / 12;
    let samples: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
        .collect();
    Ok([
        samples[..n].to_vec(),
        samples[n..2 * n].to_vec(),
        samples[2 * n..].to_vec(),
    ])
}

fn channel_bytes(channels: &[Vec<f64>; 3]) -> Vec<u8> {
    channels
        .iter()
        .flatten()
        .flat_map(|&v| (v as f32).to_le_bytes())
        .collect()
}

/// Loads and validates a dataset manifest.
pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: manifest_path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })?;
    let base = manifest_path.parent().unwrap_or(Path::new(""));
    let mut records = Vec::with_capacity(manifest.records.len());
    for entry in manifest.records {
        let channels = match (entry.channels, &entry.data_file) {
            (Some(_), Some(_)) => {
                return Err(Error::InvalidRecord {
                    record_id: entry.record_id,
                    message: "both inline channels and data_file given".into(),
                })
            }
            (None, None) => {
                return Err(Error::InvalidRecord {
                    record_id: entry.record_id,
                    message: "no channel data (inline channels or data_file)".into(),
                })
            }
            (Some(ch), None) => {
                let Ok::<[Vec<f64>; 3], _>(arr) = ch.try_into() else {
                    return Err(Error::InvalidRecord {
                        record_id: entry.record_id,
                        message: "expected exactly 3 channels".into(),
                    });
                };
                arr
            }
            (None, Some(file)) => read_channel_file(&base.join(file), &entry.record_id)?,
        };
        records.push(StrongMotionRecord {
            record_id: entry.record_id,
            station_id: entry.station_id,
            sample_rate: entry.sample_rate,
            channels,
            origin_time: entry.origin_time,
            magnitude: entry.magnitude,
            p_arrival_manual: entry.p_arrival_manual_idx,
            s_arrival_manual: entry.s_arrival_manual_idx,
        });
    }
    Dataset::new(manifest.stations, records)
}

fn data_file_name(idx: usize, record_id: &str) -> String {
    let clean: String = record_id
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect();
    format!("{idx:05}_{clean}.f32")
}

/// Writes `dataset` as a manifest at `manifest_path`. Output is a pure
/// function of the dataset, so repeated writes are byte-identical.
pub fn write_dataset(dataset: &Dataset, manifest_path: &Path, storage: ChannelStorage) -> Result<()> {
    let base = manifest_path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(PathBuf::new);
    let mut entries = Vec::with_capacity(dataset.records().len());
    for (i, r) in dataset.records().iter().enumerate() {
        let (channels, data_file) = match storage {
            ChannelStorage::Inline => (Some(r.channels.to_vec()), None),
            ChannelStorage::Binary => {
                let rel = format!("data/{}", data_file_name(i, &r.record_id));
                write_atomic(&base.join(&rel), &channel_bytes(&r.channels))?;
                (None, Some(rel))
            }
        };
        entries.push(RecordEntry {
            record_id: r.record_id.clone(),
            station_id: r.station_id.clone(),
            sample_rate: r.sample_rate,
            channels,
            data_file,
            origin_time: r.origin_time,
            magnitude: r.magnitude,
            p_arrival_manual_idx: r.p_arrival_manual,
            s_arrival_manual_idx: r.s_arrival_manual,
        });
    }
    let manifest = Manifest {
        stations: dataset.stations().values().cloned().collect(),
        records: entries,
    };
    crate::fsutil::write_json(manifest_path, &manifest)
}
