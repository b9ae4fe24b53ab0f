use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("schema error: missing column `{0}`")]
    MissingColumn(String),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("segment `{0}` has no samples")]
    EmptySegment(String),

    #[error("unknown segmentation feature `{0}` (accepted: segment_key, day, hour_of_day, all)")]
    UnknownFeature(String),

    #[error("unknown segment `{0}`")]
    UnknownSegment(String),

    #[error("unknown policy `{0}`")]
    UnknownPolicy(String),

    #[error("market-price mode mismatch: {0}")]
    ModeMismatch(String),

    #[error("{family} fit is degenerate: {reason}")]
    FitDegenerate { family: &'static str, reason: String },

    #[error("no parametric family could be fitted")]
    NoFit,

    #[error("lift is undefined when the logging value is zero")]
    UndefinedLift,

    #[error("correlation is undefined: {0}")]
    UndefinedCorrelation(&'static str),

    #[error("paired t-test is degenerate: {0}")]
    DegenerateTest(&'static str),

    #[error("unsupported operation: {0}")]
    Unsupported(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("model invariant violated: {0}")]
    Invariant(String),

    #[error("missing artifact {}: run `{}` first", .path.display(), .producer)]
    MissingArtifact { path: PathBuf, producer: &'static str },

    #[error("I/O error on {}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

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

    /// Process exit code for the command-line tool: 1 validation failure,
    /// 2 invariant-check failure, 3 I/O error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Invariant(_) => 2,
            Error::Io { .. } | Error::MissingArtifact { .. } => 3,
            Error::Csv(e) if e.is_io_error() => 3,
            Error::Json(e) if e.is_io() => 3,
            _ => 1,
        }
    }
}
