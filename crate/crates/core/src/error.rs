use thiserror::Error;

/// Crate-wide error type.
#[derive(Error, Debug)]
pub enum Error {
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch { expected: Vec<usize>, got: Vec<usize> },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unknown parameter leaf '{0}'")]
    UnknownLeaf(String),

    #[error("label {label} out of range [0, {num_classes})")]
    LabelOutOfRange { label: usize, num_classes: usize },

    #[error("i/o failure at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed header in {path}: {reason}")]
    MalformedHeader { path: String, reason: String },

    #[error("truncated payload in {path}")]
    TruncatedPayload { path: String },

    #[error("unsupported format version {got} (expected {expected}) in {path}")]
    VersionMismatch { path: String, expected: u32, got: u32 },

    #[error("numerical divergence: {0}")]
    Divergence(String),

    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    #[error("cannot satisfy unique-label constraint: batch size {batch} but only {distinct} distinct labels available")]
    UniqueLabels { batch: usize, distinct: usize },
}

pub type Result<T> = std::result::Result<T, Error>;
