use thiserror::Error;

/// Errors produced by the core library.
#[derive(Debug, Error)]
pub enum DrmError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("sphere sampling produced a zero draw {attempts} times in a row")]
    DegenerateDraw { attempts: usize },

    #[error("true risk unavailable: model has no analytic risk and no sampling distribution was given")]
    TrueRiskUnavailable,

    #[error("training diverged: non-finite parameters after iteration {iteration}")]
    Diverged { iteration: usize },

    #[error("histograms were built from different direction sets")]
    DirectionMismatch,

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl DrmError {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        DrmError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// True for errors caused by bad user input (configuration, missing or
    /// malformed input files) rather than by a failure during computation.
    pub fn is_config_error(&self) -> bool {
        matches!(
            self,
            DrmError::InvalidConfig(_) | DrmError::Json(_) | DrmError::Io { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, DrmError>;
