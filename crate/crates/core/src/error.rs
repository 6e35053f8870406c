//! One error type for the whole crate, split by failure kind so callers
//! (and the CLI exit-code mapping) can tell input problems from broken
//! invariants.

/// Crate-wide error.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Incompatible tensor shapes (names both shapes).
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    /// An argument outside its legal range (e.g. dropout p >= 1).
    #[error("invalid parameter: {0}")]
    Parameter(String),
    /// A caller or callee broke an API contract (non-scalar loss,
    /// shape-changing sublayer, non-deterministic gradcheck target, ...).
    #[error("contract violation: {0}")]
    Contract(String),
    /// Invalid model or run configuration.
    #[error("invalid config: {0}")]
    Config(String),
    /// Attention mask admits no key for some query row.
    #[error("mask error: {0}")]
    Mask(String),
    /// Sequence longer than the configured maximum.
    #[error("length error: {0}")]
    Length(String),
    /// Token or id outside the vocabulary.
    #[error("vocab error: {0}")]
    Vocab(String),
    /// Malformed file (bad magic, version, truncation, unparsable line).
    #[error("format error: {0}")]
    Format(String),
    /// Well-formed file with invalid contents (NaN payload, duplicate ids).
    #[error("data error: {0}")]
    Data(String),
    /// Training-loop failure (non-finite gradient, names the parameter).
    #[error("training error: {0}")]
    Training(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
