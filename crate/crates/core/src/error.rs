use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite input: {0}")]
    NonFinite(String),

    #[error("bad magic: expected {expected:#010x}, found {found:#010x} in {path}")]
    BadMagic {
        path: PathBuf,
        expected: u32,
        found: u32,
    },

    #[error("truncated file: {path} ({detail})")]
    Truncated { path: PathBuf, detail: String },

    #[error("count mismatch: {images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },

    #[error("partition infeasible: {0}")]
    PartitionInfeasible(String),

    #[error("divergence: non-finite parameters after round {round}")]
    Divergence { round: usize },

    #[error("unknown key: {key} (line {line})")]
    UnknownKey { key: String, line: usize },

    #[error("out of range: {key} = {value} ({expected}) (line {line})")]
    OutOfRange {
        key: String,
        value: String,
        expected: String,
        line: usize,
    },

    #[error("malformed JSON: {0}")]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
