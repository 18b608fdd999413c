use thiserror::Error;

/// Errors surfaced by the engine, trainer and file formats.
#[derive(Debug, Error)]
pub enum Error {
    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("dimension mismatch: {what} (expected {expected}, got {actual})")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("k = {k} out of range for vocabulary of size {vocab}")]
    TopKOutOfRange { k: usize, vocab: usize },

    #[error("token id {token} out of range for vocabulary of size {vocab}")]
    TokenOutOfRange { token: u32, vocab: usize },

    #[error("attention mask: {0}")]
    InvalidMask(String),

    #[error("rollback to {requested} exceeds cache length {len}")]
    RollbackBeyondLength { requested: usize, len: usize },

    #[error("input contains the reserved [SPEC] token id {0}")]
    ReservedToken(u32),

    #[error("malformed header: {0}")]
    MalformedHeader(String),

    #[error("truncated file: {0}")]
    Truncated(String),

    #[error("missing tensor `{0}`")]
    MissingTensor(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("missing drafter: mode `{mode}` requires the {variant} drafter")]
    MissingDrafter {
        mode: &'static str,
        variant: &'static str,
    },

    #[error("verifier batch does not match draft tree: {0}")]
    BatchMismatch(String),

    #[error("training diverged at iteration {iteration}: loss = {loss}")]
    Diverged { iteration: usize, loss: f64 },

    #[error("gradient check failed: max relative error {max_rel_error:.3e} at {worst}")]
    GradientCheck { max_rel_error: f64, worst: String },

    #[error("losslessness violated for example `{id}` in mode `{mode}`: first mismatch at output index {index}")]
    OracleMismatch {
        id: String,
        mode: String,
        index: usize,
    },

    #[error("dataset: {0}")]
    Dataset(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
