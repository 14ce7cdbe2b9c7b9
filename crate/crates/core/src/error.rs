//! Crate-wide error type.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("invalid dialogue {dialogue_id}: {reason}")]
    InvalidDialogue { dialogue_id: String, reason: String },

    /// The model never produced a parseable JSON value.
    #[error("no parseable JSON in model output: {raw:?}")]
    JsonProtocol { raw: String },

    #[error("summary response did not match the keywords shape: {raw:?}")]
    SummaryProtocol { raw: String },

    #[error("deep generator response unusable: {raw:?}")]
    DeepProtocol { raw: String },

    #[error("judge response unusable: {raw:?}")]
    JudgeProtocol { raw: String },

    #[error("chat backend error{}: {message}", status.map(|s| format!(" (HTTP {s})")).unwrap_or_default())]
    ChatBackend { status: Option<u16>, message: String },

    #[error("embedding backend error: {0}")]
    EmbeddingBackend(String),

    #[error("index file malformed at byte {offset}: {reason}")]
    IndexFormat { offset: u64, reason: String },

    #[error("{}:{line}: {reason}", file.display())]
    StoreFormat {
        file: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("store I/O: {0}")]
    StoreIo(#[from] std::io::Error),

    #[error("link integrity: {0}")]
    LinkIntegrity(String),

    #[error("config: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}
