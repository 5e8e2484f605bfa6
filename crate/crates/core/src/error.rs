//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: malformed record: {msg}")]
    MalformedLine {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("duplicate node id {0:?}")]
    DuplicateNode(String),

    #[error("edge references unknown node id {0:?}")]
    UnknownNode(String),

    #[error("unknown node type {0:?}")]
    UnknownType(String),

    #[error("unknown relation {0:?}")]
    UnknownRelation(String),

    #[error("node id {0} out of range (graph has {1} nodes)")]
    NodeOutOfRange(u32, usize),

    #[error("relation id {0} out of range (graph has {1} relations)")]
    RelationOutOfRange(u32, usize),

    #[error("token id {0} out of range (vocabulary size {1})")]
    TokenOutOfRange(usize, usize),

    #[error("empty corpus: graph has no nodes to build a vocabulary from")]
    EmptyCorpus,

    #[error("sequence has no non-pad tokens")]
    EmptySequence,

    #[error("sequence length {0} exceeds maximum {1}")]
    SequenceTooLong(usize, usize),

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite loss at step {step} (mlm={mlm:?}, cgp={cgp:?}); diagnostic dump: {dump}")]
    NonFiniteLoss {
        step: u64,
        mlm: Option<f64>,
        cgp: Option<f64>,
        dump: String,
    },

    #[error("relation {rel:?} has only {edges} edges; at least {min} required for a split")]
    TooFewEdges {
        rel: String,
        edges: usize,
        min: usize,
    },

    #[error("metric input length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),

    #[error("{0}")]
    Invalid(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Exit-code class for CLI consumers: configuration errors are
    /// distinguished from runtime failures.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_))
    }
}
