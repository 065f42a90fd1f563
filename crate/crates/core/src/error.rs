use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix shape {rows}x{cols} is invalid: {reason}")]
    InvalidShape {
        rows: usize,
        cols: usize,
        reason: &'static str,
    },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("linear system is singular or too ill-conditioned to solve")]
    SingularSystem,

    #[error("history window needs at least 2 matrices, got {0}")]
    DegenerateHistory(usize),

    #[error("Gram matrix inversion failed even with ridge {last_ridge:e}")]
    RidgeExhausted { last_ridge: f64 },

    #[error("invalid dimension: {0}")]
    InvalidDimension(String),

    #[error("k={k} is out of range for {available} scored clients")]
    InvalidK { k: usize, available: usize },

    #[error("trimming {trim} values from each side of {count} leaves nothing to average")]
    Overtrim { trim: usize, count: usize },

    #[error("{rule} needs at least {needed} clients, got {got}")]
    TooFewClients {
        rule: &'static str,
        needed: usize,
        got: usize,
    },

    #[error("degenerate statistics: {0}")]
    DegenerateStatistics(String),

    #[error("degenerate series: {0}")]
    DegenerateSeries(String),

    #[error("degenerate sample: {0}")]
    DegenerateSample(String),

    #[error("invalid counts: {0}")]
    InvalidCounts(String),

    #[error("not enough examples: {0}")]
    TooFewExamples(String),

    #[error("bad IDX magic number {found:#010x}, expected {expected:#010x}")]
    BadMagic { found: u32, expected: u32 },

    #[error("truncated file: {0}")]
    TruncatedFile(String),

    #[error("count mismatch: {0}")]
    CountMismatch(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("sweep expands to {runs} runs, cap is {cap}")]
    CapExceeded { runs: usize, cap: usize },

    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    #[error("{path}: {source}")]
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
}
