use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("local training diverged (non-finite parameters)")]
    Diverged,

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("no client updates")]
    EmptyUpdates,

    #[error("krum needs at least f + 3 updates, got {num_updates} with f = {byzantine}")]
    KrumTooFewUpdates {
        num_updates: usize,
        byzantine: usize,
    },

    #[error("{players} players exceeds the exact enumeration cap of {cap}")]
    TooManyPlayers { players: usize, cap: usize },

    #[error("contribution is not normalizable (sum of raw values = {sum})")]
    NonNormalizable { raw: Vec<f64>, sum: f64 },

    #[error("idx: {0}")]
    Idx(String),

    #[error("config: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
