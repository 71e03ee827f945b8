use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: parse error at line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("record {record_id}: {message}")]
    InvalidRecord { record_id: String, message: String },

    #[error("station {station_id}: {message}")]
    InvalidStation { station_id: String, message: String },

    #[error("record {record_id} references unknown station {station_id}")]
    UnknownStation {
        record_id: String,
        station_id: String,
    },

    #[error("{path}: row {line}: record {record_id}: {issue}")]
    InvalidPick {
        path: PathBuf,
        line: usize,
        record_id: String,
        issue: PickIssue,
    },

    #[error("unknown record {0}")]
    UnknownRecord(String),

    #[error("shape mismatch in {op}: {message}")]
    Shape { op: &'static str, message: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("record {record_id}: missing {which} pick")]
    MissingPick {
        record_id: String,
        which: &'static str,
    },

    #[error("record {0}: STA/LTA never exceeded the trigger ratio")]
    NoTrigger(String),

    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },

    #[error("tensor {name}: {message}")]
    TensorMismatch { name: String, message: String },

    #[error("split violates station disjointness: {0}")]
    Disjointness(String),

    #[error("empty split: {0}")]
    EmptySplit(String),

    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Diverged { epoch: usize, loss: f64 },

    #[error("clustering: {0}")]
    Cluster(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, message: impl Into<String>) -> Self {
        Error::Shape {
            op,
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum PickIssue {
    #[error("unknown record")]
    UnknownRecord,
    #[error("P pick must precede S pick")]
    Ordering,
    #[error("pick index outside the record")]
    OutOfRange,
}
