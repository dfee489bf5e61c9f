use std::path::PathBuf;

use thiserror::Error;

use crate::model::Violation;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("missing mask: {0}")]
    MissingMask(String),

    #[error("image/mask dimension mismatch for {id}: image {image:?}, mask {mask:?}")]
    DimensionMismatch {
        id: String,
        image: (usize, usize),
        mask: (usize, usize),
    },

    #[error("no samples found under {0}")]
    EmptyDataset(PathBuf),

    #[error("duplicate sample id: {0}")]
    DuplicateId(String),

    #[error("manifest {path}, line {line}: {message}")]
    Manifest {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("not enough {source_db} samples for the test split: required {required}, available {available}")]
    InsufficientSource {
        source_db: String,
        required: usize,
        available: usize,
    },

    #[error("invalid hyperparameters: {}", join_violations(.0))]
    InvalidHyperParams(Vec<Violation>),

    #[error("invalid architecture: {0}")]
    Architecture(String),

    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch { left: Vec<usize>, right: Vec<usize> },

    #[error("non-binary value {value} in mask")]
    NonBinary { value: f64 },

    #[error("non-finite loss at epoch {epoch} (batch {batch})")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("all trials failed")]
    AllTrialsFailed,

    #[error("ledger line {line}: {message}")]
    Ledger { line: usize, message: String },

    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    TomlDe(#[from] toml::de::Error),

    #[error(transparent)]
    TomlSer(#[from] toml::ser::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}

fn join_violations(v: &[Violation]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("; ")
}
