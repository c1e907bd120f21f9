use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A precondition on an argument was violated.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("matrix not symmetric (off-diagonal mismatch {0:e})")]
    NotSymmetric(f64),

    #[error("more components than points ({components} > {points})")]
    TooManyComponents { components: usize, points: usize },

    #[error("horizon mismatch: prediction has {predicted} steps, truth has {truth}")]
    HorizonMismatch { predicted: usize, truth: usize },

    #[error("insufficient points for jerk: need at least 4, got {0}")]
    InsufficientPoints(usize),

    #[error("degenerate series: {0}")]
    DegenerateSeries(&'static str),

    #[error("single-class labels: {0}")]
    SingleClass(&'static str),

    #[error("weighted sampling undefined: training set has only class {0}")]
    WeightedSamplingUndefined(u8),

    #[error("duplicate evaluation key ({0})")]
    DuplicateKey(String),

    #[error("join mismatch: {0}")]
    JoinMismatch(String),

    #[error("shape mismatch in tensor `{tensor}`: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        tensor: String,
        expected: (usize, usize),
        found: (usize, usize),
    },

    #[error("unsupported scenario kind `{0}`")]
    UnsupportedKind(String),

    #[error("missing input: {0}")]
    Missing(String),

    #[error("unsupported format version `{0}`")]
    UnsupportedVersion(String),

    #[error("malformed line {line}: {reason}")]
    MalformedLine { line: usize, reason: String },

    #[error("checksum mismatch in {0}")]
    Checksum(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },

    #[error("serialization: {0}")]
    Serde(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
