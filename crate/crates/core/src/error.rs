use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the decoding pipeline.
#[derive(Debug, Error)]
pub enum HcspError {
    #[error("failed to read {path}: {source}")]
    Load {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("failed to write {path}: {source}")]
    Write {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Malformed manifest, trial file or model file.
    #[error("schema error: {0}")]
    Schema(String),

    /// A caller-supplied value violates an operation's precondition.
    #[error("invalid parameter `{name}`: {reason}")]
    Parameter { name: &'static str, reason: String },

    /// Training data cannot support the requested model.
    #[error("training error: {0}")]
    Training(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    /// A trained model does not fit the data it is applied to.
    #[error("model error: {0}")]
    Model(String),

    #[error("degenerate trial: {0}")]
    DegenerateTrial(String),
}

impl HcspError {
    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        HcspError::Parameter {
            name,
            reason: reason.into(),
        }
    }
}

pub type Result<T, E = HcspError> = std::result::Result<T, E>;
