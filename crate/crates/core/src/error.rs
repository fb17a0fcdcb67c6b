use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: malformed header: {reason}")]
    MalformedHeader { path: PathBuf, reason: String },

    #[error("{path}: line {line}: expected {expected} columns, found {found}")]
    RowArity {
        path: PathBuf,
        line: usize,
        expected: usize,
        found: usize,
    },

    #[error("{path}: line {line}: cannot parse column {column} value {value:?}")]
    ParseValue {
        path: PathBuf,
        line: usize,
        column: usize,
        value: String,
    },

    #[error("{path}: line {line}: non-finite feature value in column {column}")]
    NonFinite {
        path: PathBuf,
        line: usize,
        column: usize,
    },

    #[error("{path}: line {line}: duplicate tile_id {tile_id:?}")]
    DuplicateTileId {
        path: PathBuf,
        line: usize,
        tile_id: String,
    },

    #[error("{path}: line {line}: label {label:?} is not in the declared label set")]
    UnknownLabel {
        path: PathBuf,
        line: usize,
        label: String,
    },

    #[error("invalid feature set: {0}")]
    InvalidFeatureSet(String),

    #[error("tile {tile_id:?} has a zero feature vector; cosine distance is undefined")]
    ZeroVector { tile_id: String },

    #[error("cosine distance undefined for a zero vector")]
    ZeroNorm,

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("feature set must be normalized before clustering")]
    NotNormalized,

    #[error("invalid cluster count k={k} for {n} records")]
    InvalidK { k: usize, n: usize },

    #[error("image {image_id:?}: mean of assigned centroids is the zero vector")]
    ZeroMeanCentroid { image_id: String },

    #[error("too few points for knee detection: {found} (need at least {required})")]
    TooFewPoints { found: usize, required: usize },

    #[error("curve contains a non-finite value at index {index}")]
    NonFiniteCurve { index: usize },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("p-value {0} outside [0, 1]")]
    InvalidProbability(f64),

    #[error("degenerate sample: {0}")]
    Degenerate(String),

    #[error("annotation references unknown cluster {cluster_index} of diagnosis {diagnosis:?}")]
    UnknownCluster { diagnosis: String, cluster_index: usize },

    #[error("{path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("JSON error on {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("CSV error on {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn csv(path: impl Into<PathBuf>, source: csv::Error) -> Self {
        Error::Csv {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
