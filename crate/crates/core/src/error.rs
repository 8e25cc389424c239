// SPDX-License-Identifier: MIT OR Apache-2.0

//! Crate-wide error type.

use std::path::PathBuf;

/// Errors raised anywhere in the lab.
#[derive(Debug, thiserror::Error)]
pub enum LabError {
    /// A configuration value is invalid. `field` is a dotted path into the config.
    #[error("invalid config at `{field}`: {reason}")]
    Config { field: String, reason: String },

    /// The entity pool cannot satisfy a request.
    #[error("entity pool: {0}")]
    Pool(String),

    /// A query, corruption or noise request does not fit the table.
    #[error("table: {0}")]
    Table(String),

    /// A prompt could not be built or exceeds the context window.
    #[error("prompt: {0}")]
    Prompt(String),

    /// A word is not in the closed vocabulary.
    #[error("unknown token `{0}`")]
    UnknownToken(String),

    /// Tensor shapes disagree.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// An intervention references a point that does not exist.
    #[error("invalid intervention: {0}")]
    Intervention(String),

    /// NaN, divergence or a singular system.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// An upstream artifact is missing; `hint` names the subcommand producing it.
    #[error("missing prerequisite {path}: run `{hint}` first")]
    Prerequisite { path: PathBuf, hint: String },

    /// Malformed checkpoint or store file.
    #[error("format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = LabError> = std::result::Result<T, E>;

impl LabError {
    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Self::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }
}
