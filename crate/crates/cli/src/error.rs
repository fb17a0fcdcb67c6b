use std::path::PathBuf;

use thiserror::Error;

/// Exit codes, one per error class.
pub mod exit {
    pub const OTHER: u8 = 1;
    pub const USAGE: u8 = 2;
    pub const CONFIG: u8 = 3;
    pub const INPUT: u8 = 4;
    pub const DATA: u8 = 5;
    pub const COMPUTE: u8 = 6;
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("missing input file: {}", .0.display())]
    MissingInput(PathBuf),

    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{0}")]
    Runtime(String),

    #[error(transparent)]
    Core(#[from] pattern_atlas::Error),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn exit_code(&self) -> u8 {
        use pattern_atlas::Error as E;
        match self {
            CliError::Config(_) => exit::CONFIG,
            CliError::Runtime(_) => exit::OTHER,
            CliError::MissingInput(_) | CliError::Io { .. } => exit::INPUT,
            CliError::Core(e) => match e {
                E::Io { .. } | E::Image { .. } => exit::INPUT,
                E::InvalidParameter(_) | E::InvalidProbability(_) => exit::CONFIG,
                E::MalformedHeader { .. }
                | E::RowArity { .. }
                | E::ParseValue { .. }
                | E::NonFinite { .. }
                | E::DuplicateTileId { .. }
                | E::UnknownLabel { .. }
                | E::InvalidFeatureSet(_)
                | E::ZeroVector { .. }
                | E::DimensionMismatch { .. }
                | E::NotNormalized
                | E::UnknownCluster { .. }
                | E::Format { .. }
                | E::Json { .. }
                | E::Csv { .. } => exit::DATA,
                E::ZeroNorm
                | E::InvalidK { .. }
                | E::ZeroMeanCentroid { .. }
                | E::TooFewPoints { .. }
                | E::NonFiniteCurve { .. }
                | E::Empty(_)
                | E::Degenerate(_) => exit::COMPUTE,
            },
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
