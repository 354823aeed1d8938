use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("malformed input: {0}")]
    Malformed(String),

    #[error("unbalanced panel: {0}")]
    UnbalancedPanel(String),

    #[error("treatment is not absorbing: {0}")]
    AbsorbingViolation(String),

    #[error("identification: {0}")]
    Identification(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("cannot split: {0}")]
    Split(String),

    #[error("precision matrix for block `{block}` is not positive definite")]
    NotPositiveDefinite { block: String },

    #[error("GLS system is rank deficient; block `{block}` is not identified")]
    RankDeficient { block: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("estimation failed: {0}")]
    Estimation(String),
}

impl Error {
    /// Stable machine-readable code used in CLI error documents.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Csv(_) => "csv",
            Error::Json(_) => "json",
            Error::Malformed(_) => "malformed-input",
            Error::UnbalancedPanel(_) => "unbalanced-panel",
            Error::AbsorbingViolation(_) => "absorbing-violation",
            Error::Identification(_) => "identification",
            Error::Dimension(_) => "dimension",
            Error::Domain(_) => "domain",
            Error::Split(_) => "split",
            Error::NotPositiveDefinite { .. } => "not-positive-definite",
            Error::RankDeficient { .. } => "rank-deficient",
            Error::Config(_) => "config",
            Error::Estimation(_) => "estimation",
        }
    }

    /// True for errors caused by bad input rather than by the numerics.
    pub fn is_input_error(&self) -> bool {
        !matches!(
            self,
            Error::NotPositiveDefinite { .. } | Error::RankDeficient { .. } | Error::Estimation(_)
        )
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
