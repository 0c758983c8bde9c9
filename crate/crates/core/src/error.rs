use thiserror::Error;

/// Crate-wide error type.
///
/// Variants are grouped by layer: graph construction, numerics, model
/// fitting, task generation / objective evaluation, and I/O-plus-config
/// plumbing. Functions that can only fail in one layer still return this
/// type so call sites compose without conversions.
#[derive(Debug, Error)]
pub enum Error {
    /// A graph was built with incompatible shapes or an op was applied to
    /// operands it does not accept. Always a programming error, never data.
    #[error("graph construction: {0}")]
    Graph(String),

    /// A caller violated a documented precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Linear algebra broke down (non-positive-definite matrix after the
    /// jitter ladder, NaN in gradients, and the like). Recoverable by the
    /// fitting layer via re-initialization.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// Model training failed even after re-initialization retries.
    #[error("fit failure: {0}")]
    Fit(String),

    /// An objective evaluation could not produce a value (subprocess died,
    /// timed out, returned garbage).
    #[error("evaluation failure: {0}")]
    Evaluation(String),

    /// A task generator could not produce a valid task (e.g. a degenerate
    /// label draw that retries did not fix).
    #[error("generation failure: {0}")]
    Generation(String),

    /// Malformed input data, with a 1-based line number when known.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// Invalid experiment configuration.
    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("serialization: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
