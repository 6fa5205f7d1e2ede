use std::path::PathBuf;

use crate::model::CacheKey;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    /// A checkpoint could not be loaded. `tensor` names the offending entry.
    #[error("load error ({tensor}): {reason}")]
    Load { tensor: String, reason: String },

    #[error("invalid model config: {0}")]
    Config(String),

    #[error("tokenizer error: {0}")]
    Tokenizer(String),

    #[error("sequence length {len} outside 1..={max}")]
    Length { len: usize, max: usize },

    #[error("token id {id} out of range for vocabulary of size {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid patch: {0}")]
    InvalidPatch(String),

    #[error("conflicting patches on {key} at {cell}: {first} vs {second}")]
    PatchConflict {
        key: CacheKey,
        cell: String,
        first: String,
        second: String,
    },

    #[error("missing activation {0} in donor cache")]
    MissingActivation(CacheKey),

    #[error("template error: {0}")]
    Template(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("undefined: {0}")]
    Undefined(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn load(tensor: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Load {
            tensor: tensor.into(),
            reason: reason.into(),
        }
    }
}
