use thiserror::Error;

/// Errors surfaced by the library. The CLI maps variants onto exit codes,
/// so new failure modes should reuse an existing category where possible.
#[derive(Debug, Error)]
pub enum Error {
    /// Shape or dimension mismatch; the message names both shapes.
    #[error("dimension error: {0}")]
    Dim(String),

    /// Input outside a primitive's domain (e.g. log of a non-positive value).
    #[error("domain error: {0}")]
    Domain(String),

    /// A caller violated an operation's precondition.
    #[error("contract error: {0}")]
    Contract(String),

    #[error("config error: {0}")]
    Config(String),

    /// Corpus, manifest, checkpoint or other on-disk data problems.
    #[error("data error: {0}")]
    Data(String),

    /// Non-finite values where finite ones are required; training aborts.
    #[error("numeric abort: {0}")]
    Numeric(String),

    /// A metric is undefined on the given inputs (e.g. single-class EER).
    #[error("metric undefined: {0}")]
    Metric(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
