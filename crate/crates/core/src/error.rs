use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: {left} vs {right}")]
    Dimension {
        context: &'static str,
        left: String,
        right: String,
    },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("non-finite gradient in slot `{slot}`")]
    Numeric { slot: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dictionary error: {0}")]
    Dictionary(String),

    #[error("alignment error: {0}")]
    Alignment(String),

    #[error("training diverged at epoch {epoch}: {message}")]
    Training { epoch: usize, message: String },

    #[error("malformed data: {0}")]
    Data(String),

    #[error("incompatible checkpoint: {0}")]
    Compatibility(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dims(context: &'static str, left: impl ToString, right: impl ToString) -> Self {
        Error::Dimension {
            context,
            left: left.to_string(),
            right: right.to_string(),
        }
    }
}
