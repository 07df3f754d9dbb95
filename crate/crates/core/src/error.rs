use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed tensor file: {0}")]
    Format(String),

    #[error("unsupported element type {0:?}; only '<f4' and '<f8' are accepted")]
    UnsupportedDtype(String),

    #[error("non-finite value {value} at flat index {index}")]
    NonFinite { index: usize, value: f64 },

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("missing file referenced by manifest: {0}")]
    MissingFile(PathBuf),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("normalizer contract violated: {0}")]
    NormalizerContract(String),

    #[error("value out of range: {0}")]
    Range(String),

    #[error("at least {subsets} subsets exceed the exact-enumeration cap of {cap}; use the monte_carlo oracle")]
    Capacity { subsets: u128, cap: u128 },

    #[error("embedding row {row} has zero norm")]
    DegenerateEmbedding { row: usize },

    #[error("selection covers every token; no complement to measure against")]
    NoComplement,

    #[error("assumption violated: {0}")]
    AssumptionViolation(String),

    #[error("packing failed: placed {achieved} of {requested} points with the requested minimum separation")]
    Packing { achieved: usize, requested: usize },

    #[error("invalid input: {0}")]
    Input(String),

    #[error("internal invariant violated: {0}")]
    Invariant(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures of an internal invariant rather than of the caller's input.
    pub fn is_internal(&self) -> bool {
        matches!(self, Error::Invariant(_))
    }
}
