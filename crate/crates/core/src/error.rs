//! Error types shared across the crate.

use thiserror::Error;

/// Failure modes surfaced by the library.
///
/// `Contract` marks a violated precondition, `Numeric` a non-finite value
/// produced by a named operation, `Validation` a script that failed
/// structural checks.
#[derive(Debug, Error)]
pub enum CoreError {
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("numeric failure in `{op}`: {detail}")]
    Numeric { op: String, detail: String },

    #[error("script validation failed: {}", format_violations(.0))]
    Validation(Vec<String>),

    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),

    #[error("no JSON object found in response")]
    NoJsonFound,

    #[error("LLM client error: {0}")]
    Client(String),

    #[error("checksum mismatch for {0}")]
    Checksum(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl CoreError {
    pub fn contract(msg: impl Into<String>) -> Self {
        CoreError::Contract(msg.into())
    }

    pub fn numeric(op: impl Into<String>, detail: impl Into<String>) -> Self {
        CoreError::Numeric {
            op: op.into(),
            detail: detail.into(),
        }
    }
}

fn format_violations(violations: &[String]) -> String {
    violations.join("; ")
}

pub type Result<T> = std::result::Result<T, CoreError>;
