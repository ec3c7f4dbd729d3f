use std::fmt;

/// Identifies a node of a computation tape in diagnostics.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeRef {
    pub index: usize,
    pub op: &'static str,
    pub shape: (usize, usize),
}

impl fmt::Display for NodeRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "node #{} ({}, {}x{})",
            self.index, self.op, self.shape.0, self.shape.1
        )
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs} vs {rhs}")]
    ShapeMismatch {
        op: &'static str,
        lhs: NodeRef,
        rhs: NodeRef,
    },
    #[error("invalid operand for {op}: {node}: {reason}")]
    InvalidOperand {
        op: &'static str,
        node: NodeRef,
        reason: String,
    },
    #[error("leaf values changed since the last forward pass; call forward() before backward()")]
    StaleGraph,
    #[error("backward root must be a scalar, got {0}")]
    NonScalarRoot(NodeRef),
    #[error("non-finite value encountered at {0}")]
    NonFinite(NodeRef),
    #[error("non-finite gradient for {0}; state left unchanged")]
    NonFiniteGradient(String),
    #[error("tensor data length {len} does not match shape {rows}x{cols}")]
    BadTensor { rows: usize, cols: usize, len: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: String, got: String },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("{kind} lattice cannot hold {count} neurons; admissible counts: {admissible}")]
    LatticeLayout {
        kind: String,
        count: usize,
        admissible: String,
    },
    #[error("lattice hash mismatch for {0}: model was trained with a different population layout")]
    LatticeHashMismatch(String),
    #[error("parse error at line {line}: {message}")]
    Parse { line: u64, message: String },
    #[error("invalid snapshot: {0}")]
    Snapshot(String),
    #[error("non-finite loss at {context}")]
    NonFiniteLoss { context: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
