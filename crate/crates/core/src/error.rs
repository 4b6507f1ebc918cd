use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed header: {0}")]
    MalformedHeader(String),

    #[error("truncated data: {0}")]
    TruncatedData(String),

    #[error("duplicate tensor name `{0}`")]
    DuplicateTensor(String),

    #[error("non-finite value in tensor `{0}`")]
    NonFinite(String),

    #[error("unsupported dtype `{0}`")]
    UnsupportedDtype(String),

    #[error("empty model `{0}`")]
    EmptyModel(String),

    #[error("degenerate shape {shape:?} for tensor `{name}`")]
    DegenerateShape { name: String, shape: Vec<usize> },

    #[error("tensor `{name}`: shape {shape:?} does not match {len} values")]
    LengthMismatch {
        name: String,
        shape: Vec<usize>,
        len: usize,
    },

    #[error("shape mismatch for layer `{name}`: {left:?} vs {right:?}")]
    ShapeMismatch {
        name: String,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("no common layers between `{0}` and `{1}`")]
    NoCommonLayers(String, String),

    #[error("degenerate layer: {0}")]
    DegenerateLayer(String),

    #[error("zero-norm input: {0}")]
    ZeroNorm(String),

    #[error("invalid manifest: {0}")]
    Manifest(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("node {0} is unreachable from the root")]
    Unreachable(usize),

    #[error("oracle size guard: n = {0} exceeds 8")]
    OracleSizeGuard(usize),

    #[error("retry budget exhausted: {0}")]
    RetryExhausted(String),

    #[error("pair ({a}, {b}): {source}")]
    Pair {
        a: String,
        b: String,
        #[source]
        source: Box<Error>,
    },

    #[error("cluster {cluster}: {source}")]
    Cluster {
        cluster: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn pair(a: &str, b: &str, source: Error) -> Self {
        Error::Pair {
            a: a.to_string(),
            b: b.to_string(),
            source: Box::new(source),
        }
    }
}
