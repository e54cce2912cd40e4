use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, UnmixError>;

#[derive(Debug, Error)]
pub enum UnmixError {
    #[error("input contains non-finite values ({0})")]
    NonFinite(&'static str),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("image is already centered")]
    AlreadyCentered,

    #[error("bad magic in {path}: expected NLUNMIX1")]
    MagicMismatch { path: PathBuf },

    #[error("truncated payload in {path}: expected {expected} bytes, found {found}")]
    TruncatedPayload {
        path: PathBuf,
        expected: u64,
        found: u64,
    },

    #[error("matrix dimensions {rows}x{cols} overflow the addressable size")]
    DimensionOverflow { rows: u64, cols: u64 },

    #[error("parse error: {0}")]
    Parse(String),

    #[error("covariance core is not positive definite (failing pivot {pivot})")]
    NotPositiveDefinite { pivot: usize },

    #[error("matrix is rank deficient: {0}")]
    RankDeficient(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("optimizer aborted: {0}")]
    OptimizerAborted(String),

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<UnmixError>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl UnmixError {
    pub fn at_stage(self, stage: &'static str) -> Self {
        UnmixError::Stage {
            stage,
            source: Box::new(self),
        }
    }
}
