use std::path::PathBuf;

/// Coarse failure class, used by front-ends to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    /// Malformed or inconsistent inputs: files, shapes, graph structure.
    Data,
    /// Numerically invalid state: non-finite values, empty statistics.
    Numeric,
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("dtype mismatch: {0}")]
    DtypeMismatch(String),

    #[error("non-integral output size: {0}")]
    NonIntegralOutput(String),

    #[error("invalid graph: {0}")]
    InvalidGraph(String),

    #[error("cycle detected in graph")]
    Cycle,

    #[error("unknown node id `{0}`")]
    UnknownNode(String),

    #[error("node `{node}`: {source}")]
    Node {
        node: String,
        #[source]
        source: Box<Error>,
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("empty histogram")]
    EmptyHistogram,

    #[error("value {value} outside frozen histogram range [{lo}, {hi}]")]
    HistogramRange { value: f32, lo: f32, hi: f32 },

    #[error("invalid quantization parameters: {0}")]
    InvalidQparams(String),

    #[error("missing quantization parameters for {kind} `{name}`")]
    MissingQparams { kind: &'static str, name: String },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("metric error: {0}")]
    Metric(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Tag an error with the graph node it occurred at.
    pub fn at_node(self, node: &str) -> Self {
        Error::Node {
            node: node.to_string(),
            source: Box::new(self),
        }
    }

    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::NonFinite(_)
            | Error::EmptyHistogram
            | Error::HistogramRange { .. }
            | Error::InvalidQparams(_) => ErrorCategory::Numeric,
            Error::Node { source, .. } => source.category(),
            _ => ErrorCategory::Data,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
