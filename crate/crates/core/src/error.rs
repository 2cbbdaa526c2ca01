use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("cannot access {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {reason}")]
    MalformedLine { line: usize, reason: String },
    #[error("input contains no interactions")]
    EmptyInput,
    #[error("no interactions survive {k_core}-core filtering")]
    EmptyAfterFiltering { k_core: usize },
    #[error("split ratios must be non-negative and sum to 1, got {0:?}")]
    InvalidRatios((f64, f64, f64)),
    #[error("{kind} id {id} out of range (count {bound})")]
    IdOutOfRange { kind: &'static str, id: usize, bound: usize },
    #[error("row {row} has zero norm")]
    DegenerateEmbedding { row: usize },
    #[error("uniformity needs at least 2 rows, got {n}")]
    InsufficientBatch { n: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("user {user} has interacted with every item")]
    NoNegativeAvailable { user: usize },
    #[error("non-finite gradient in row {row}")]
    DivergedGradient { row: usize },
    #[error("no user has items in the evaluated split")]
    NothingToEvaluate,
    #[error("geometry measurement needs at least 2 interactions, got {n}")]
    InsufficientData { n: usize },
    #[error("config: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
