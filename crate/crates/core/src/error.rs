use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("edge {edge} references node {node}, but the graph has {nodes} nodes")]
    NodeOutOfRange { edge: usize, node: u32, nodes: usize },

    #[error("node index {index} out of range (node count {len})")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("unknown edge id {0}")]
    UnknownEdge(u32),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite values produced by `{op}`")]
    NonFinite { op: &'static str },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("csv line {line}: {msg}")]
    Parse { line: u64, msg: String },

    #[error("schema: {0}")]
    Schema(String),

    #[error("config: {0}")]
    Config(String),

    #[error("graph too large for dense spectral routines: {nodes} nodes (limit {limit})")]
    TooLarge { nodes: usize, limit: usize },

    #[error("training aborted at epoch {epoch}: {msg}")]
    Training { epoch: u32, msg: String },

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable machine-readable tag for CLI error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::NodeOutOfRange { .. } => "node_out_of_range",
            Error::IndexOutOfRange { .. } => "index_out_of_range",
            Error::UnknownEdge(_) => "unknown_edge",
            Error::Shape(_) => "shape",
            Error::NonFinite { .. } => "non_finite",
            Error::Empty(_) => "empty",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::Parse { .. } => "parse",
            Error::Schema(_) => "schema",
            Error::Config(_) => "config",
            Error::TooLarge { .. } => "too_large",
            Error::Training { .. } => "training",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
