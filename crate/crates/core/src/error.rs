use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Dimension { op: &'static str, lhs: (usize, usize), rhs: (usize, usize) },

    #[error("numeric domain error in {0}")]
    NumericDomain(String),

    #[error("probability domain error: {0}")]
    ProbabilityDomain(String),

    #[error("empty input to {0}")]
    EmptyInput(&'static str),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),

    #[error("non-finite loss at step {step} in term `{term}` (value {value})")]
    NonFiniteLoss { step: usize, term: String, value: f64 },

    #[error("unknown variant `{0}`")]
    UnknownVariant(String),

    #[error("incompatible runs: {0}")]
    IncompatibleRuns(String),

    #[error("unsupported format version {found} in {what} (expected {expected})")]
    FormatVersion { what: String, found: u32, expected: u32 },

    #[error("[{stage}] {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {what}: {msg}")]
    Parse { what: String, msg: String },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage { stage, source: Box::new(self) }
    }
}
