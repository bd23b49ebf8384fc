use std::path::PathBuf;

/// Errors produced across the diffing pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("corrupt data: {0}")]
    Corruption(String),

    #[error("non-finite value in row {row}")]
    NonFiniteRow { row: u64 },

    #[error("shards are not pairable: {field} differs ({base} vs {ft})")]
    Pairing {
        field: &'static str,
        base: String,
        ft: String,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid parameter: {0}")]
    Param(String),

    #[error("normalization failed: {0}")]
    Normalization(String),

    #[error("training error: {0}")]
    Training(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("latent {0} never fires on the stream; scaling coefficient undefined")]
    UndefinedBeta(usize),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("endpoint error: {0}")]
    Endpoint(String),

    #[error("generation error: {0}")]
    Generation(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("category universe mismatch; strays: {strays:?}")]
    Category { strays: Vec<String> },

    #[error("unparseable completion: {reason}; raw text: {raw:?}")]
    Completion { reason: String, raw: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
