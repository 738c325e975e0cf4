use std::path::PathBuf;

use crate::lattice::LatticeSite;

/// Errors raised across the designer.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid geometry: {0}")]
    Geometry(String),

    #[error("sites {0} and {1} are adjacent")]
    Adjacent(LatticeSite, LatticeSite),

    #[error("duplicate site {0}")]
    DuplicateSite(LatticeSite),

    #[error("charge configuration has {got} entries but the layout has {expected} sites")]
    Misaligned { expected: usize, got: usize },

    #[error("layout has {sites} sites, exhaustive limit is {limit}")]
    TooLarge { sites: usize, limit: usize },

    #[error("invalid physical parameters: {0}")]
    Params(String),

    #[error("invalid truth table: {0}")]
    TruthTable(String),

    #[error("invalid task: {0}")]
    Task(String),

    #[error("assembly conflict at site {0}: {1}")]
    Assembly(LatticeSite, String),

    #[error("output port dot {0} missing from layout")]
    MissingPortDot(LatticeSite),

    #[error("invalid action {0}: {1}")]
    InvalidAction(usize, String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value during training: {0}")]
    NonFinite(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("unsupported format {0:?}")]
    Format(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
