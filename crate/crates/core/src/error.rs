use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("user {user_id} references unknown label {label_id}")]
    DanglingLabel { user_id: String, label_id: String },

    #[error("duplicate user id {0}")]
    DuplicateUser(String),

    #[error("invalid label {name}: {message}")]
    InvalidLabel { name: String, message: String },

    #[error("no class has at least {min_count} users; dataset would be empty")]
    EmptyDataset { min_count: usize },

    #[error("class {label} has {count} users; at least {required} are needed")]
    ClassTooSmall {
        label: String,
        count: usize,
        required: usize,
    },

    #[error("token id {id} out of vocabulary range {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: String, got: String },

    #[error("prompt template {template:?} must contain exactly one [CLASS] slot, found {found}")]
    PromptSlot { template: String, found: usize },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("coordinate out of range: ({lat}, {lon})")]
    Coordinate { lat: f64, lon: f64 },

    #[error("empty test set")]
    EmptyTestSet,

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
