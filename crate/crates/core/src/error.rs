use thiserror::Error;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum TcmError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("numeric failure in {context}: {detail}")]
    Numeric { context: String, detail: String },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("invalid structural causal model: {0}")]
    Spec(String),

    #[error("invalid config key `{key}`: {reason}")]
    Config { key: String, reason: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl TcmError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        TcmError::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn numeric(context: impl Into<String>, detail: impl Into<String>) -> Self {
        TcmError::Numeric {
            context: context.into(),
            detail: detail.into(),
        }
    }

    pub(crate) fn config(key: impl Into<String>, reason: impl Into<String>) -> Self {
        TcmError::Config {
            key: key.into(),
            reason: reason.into(),
        }
    }

    /// Prefix the context of a numeric failure, e.g. with an iteration index.
    pub fn in_context(self, prefix: impl std::fmt::Display) -> Self {
        match self {
            TcmError::Numeric { context, detail } => TcmError::Numeric {
                context: format!("{prefix}: {context}"),
                detail,
            },
            other => other,
        }
    }
}

pub type Result<T> = std::result::Result<T, TcmError>;
