use thiserror::Error;

/// Errors raised by model construction, inference, sampling and training.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid topology: {0}")]
    InvalidTopology(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("inconsistent configuration: {0}")]
    InconsistentConfiguration(String),
    #[error("invalid observation sequence: {0}")]
    InvalidObservation(String),
    #[error("malformed transition levels: {0}")]
    MalformedLevels(String),
    #[error(
        "instance too large for enumeration: {count} configurations exceed the limit of {limit}"
    )]
    TooLargeForEnumeration { count: u128, limit: u128 },
    #[error("depth too large for collapsed exact inference: {slice_states} slice states exceed the cap of {cap}")]
    DepthTooLarge { slice_states: usize, cap: usize },
    #[error("boundary {t} out of range for a sequence of length {length}")]
    BoundaryOutOfRange { t: usize, length: usize },
    #[error("all samples burned: {n_iters} iterations with {burn_in} burn-in")]
    AllSamplesBurned { n_iters: usize, burn_in: usize },
    #[error("invalid sampler settings: {0}")]
    InvalidSettings(String),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("record {0} is unlabeled")]
    UnlabeledRecord(usize),
    #[error("training diverged at epoch {epoch}")]
    Diverged { epoch: usize },
    #[error("invalid generative parameters: {0}")]
    InvalidGenerative(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
