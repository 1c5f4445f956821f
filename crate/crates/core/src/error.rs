//! Crate-wide error type.

/// Error raised by tensor ops, model construction, datasets and persistence.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A tensor operation was handed incompatible shapes. `detail` names the
    /// offending dimension(s).
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// A value that must be finite was not.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// Orthonormalization hit a (near-)linearly-dependent row.
    #[error("orthonormalize: row {row} is linearly dependent (pivot norm {norm:.3e} < 1e-8)")]
    DependentRow { row: usize, norm: f64 },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("{0}")]
    Invalid(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("image: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }
}
