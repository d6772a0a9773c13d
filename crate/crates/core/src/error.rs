use thiserror::Error;

/// Errors raised anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("grid error: {0}")]
    Grid(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("checkpoint: unknown schema version {0}")]
    UnknownVersion(u32),
    #[error("checkpoint: corrupt tensor table: {0}")]
    CorruptTable(String),
    #[error("checkpoint: tensors.bin too short for entry `{entry}` (needs {needed} bytes, file has {actual})")]
    ShortFile {
        entry: String,
        needed: u64,
        actual: u64,
    },
    #[error("checkpoint manifest: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}
