use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, GramError>;

#[derive(Debug, Error)]
pub enum GramError {
    #[error("configuration error in `{param}`: {reason}")]
    Config { param: String, reason: String },

    #[error("load error at {path}: {reason}")]
    Load { path: PathBuf, reason: String },

    #[error("routing error: {0}")]
    Routing(String),

    #[error("routing stats error: {0}")]
    Stats(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("label error: {0}")]
    Label(String),

    #[error("loss error in {component}: {reason}")]
    Loss { component: String, reason: String },

    #[error("usage error: {0}")]
    Usage(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("checkpoint config mismatch: {0}")]
    ConfigMismatch(String),

    #[error("selection error: {0}")]
    Selection(String),

    #[error("stability undefined: {0}")]
    StabilityUndefined(String),

    #[error("metric error: {0}")]
    Metric(String),

    #[error("analysis error: {0}")]
    Analysis(String),

    #[error("numerical failure at epoch {epoch}, step {step}: {reason}")]
    Numerical {
        epoch: usize,
        step: usize,
        reason: String,
    },

    #[error("missing artifact: {0}")]
    MissingArtifact(PathBuf),

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serde(String),
}

impl GramError {
    pub fn config(param: impl Into<String>, reason: impl Into<String>) -> Self {
        GramError::Config {
            param: param.into(),
            reason: reason.into(),
        }
    }

    pub fn load(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        GramError::Load {
            path: path.into(),
            reason: reason.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        GramError::Io {
            path: path.into(),
            source,
        }
    }
}

impl From<serde_json::Error> for GramError {
    fn from(e: serde_json::Error) -> Self {
        GramError::Serde(e.to_string())
    }
}
