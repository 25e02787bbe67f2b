use std::path::PathBuf;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("system has {atoms} atoms, above the limit of {limit}")]
    TooManyAtoms { atoms: usize, limit: usize },

    #[error(
        "slab {slab} is {width:.4} Å wide along axis {axis}, narrower than the {cutoff:.4} Å cutoff"
    )]
    PartitionWidth {
        slab: usize,
        axis: usize,
        width: f64,
        cutoff: f64,
    },

    #[error("shape mismatch: expected {expected}, got {found}")]
    Shape { expected: String, found: String },

    #[error("internal consistency failure: {0}")]
    Consistency(String),

    #[error("non-finite value in layer {layer} at atom {atom}")]
    NonFinite { layer: String, atom: usize },

    #[error("partition {partition} failed: {source}")]
    Worker {
        partition: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("non-finite forces at MD step {step}")]
    MdDiverged { step: usize },

    #[error("invalid parameter file: {0}")]
    Params(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
