//! Crate-wide error type.

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A configuration field is missing, out of range or inconsistent.
    #[error("configuration error in `{field}`: {message}")]
    Config { field: String, message: String },

    /// An operation received inputs violating its preconditions.
    #[error("input error: {0}")]
    Input(String),

    /// Shape mismatch between tensors/images.
    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: String, got: String },

    /// A decoder head index that does not exist on this model.
    #[error("head addressing error: {0}")]
    Addressing(String),

    /// Model parameters are unusable (e.g. non-finite values).
    #[error("model state error: {0}")]
    ModelState(String),

    /// NaN or infinity encountered where finite values are required.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// A referenced model id could not be resolved.
    #[error("model registry error: no model with id `{0}`")]
    Registry(String),

    /// Checkpoint has an unsupported format version.
    #[error("checkpoint version mismatch: file has version {found}, this build supports version {supported}; migrate the checkpoint first")]
    CheckpointVersion { found: u32, supported: u32 },

    /// Checkpoint bytes fail structural or digest validation.
    #[error("checkpoint integrity error: {0}")]
    CheckpointIntegrity(String),

    /// A pipeline stage was invoked before the stage it depends on.
    #[error("stage dependency error: {0}")]
    StageDependency(String),

    /// Training produced a non-finite loss.
    #[error("training diverged at step {step} ({term}); last checkpoint: {}", last_checkpoint.as_ref().map(|p| p.display().to_string()).unwrap_or_else(|| "none".into()))]
    TrainingDiverged {
        step: usize,
        term: String,
        last_checkpoint: Option<PathBuf>,
    },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image decode error: {0}")]
    ImageDecode(String),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("config parse error: {0}")]
    TomlParse(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(field: &str, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.to_string(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
