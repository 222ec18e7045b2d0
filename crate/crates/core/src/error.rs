use thiserror::Error;

/// Structural problems reported by graph validation and topological sorting.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum GraphFault {
    Cycle,
    ShapeMismatch(String),
    DanglingTensor(u32),
    DuplicateProducer(u32),
    DuplicateNodeId,
    Malformed(String),
}

impl std::fmt::Display for GraphFault {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            GraphFault::Cycle => write!(f, "cycle"),
            GraphFault::ShapeMismatch(d) => write!(f, "shape mismatch: {d}"),
            GraphFault::DanglingTensor(t) => write!(f, "dangling tensor t{t}"),
            GraphFault::DuplicateProducer(t) => write!(f, "tensor t{t} has more than one producer"),
            GraphFault::DuplicateNodeId => write!(f, "duplicate node id"),
            GraphFault::Malformed(d) => write!(f, "{d}"),
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("dtype mismatch in {op}: {detail}")]
    DType { op: &'static str, detail: String },

    #[error("invalid range: {0}")]
    Range(String),

    #[error("similarity undefined: both tensors have zero norm")]
    UndefinedSimilarity,

    #[error("graph fault at node {node:?}: {fault}")]
    Graph { node: Option<u32>, fault: GraphFault },

    #[error("quantized value out of range: {0}")]
    Integrity(String),

    #[error("profile does not cover {0}")]
    Coverage(String),

    #[error("adapter error: {0}")]
    Adapter(String),

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("distillation diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f32 },

    #[error("format error: {0}")]
    Format(String),

    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },

    #[error("binding error: {0}")]
    Binding(String),

    #[error("invalid parameter: {0}")]
    Param(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn graph(node: Option<u32>, fault: GraphFault) -> Self {
        Error::Graph { node, fault }
    }

    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension { op, detail: detail.into() }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
