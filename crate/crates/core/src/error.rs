//! Error type shared by every stage of the pipeline.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// The graph file violates the on-disk schema (unknown key, bad type,
    /// missing field, unknown node kind, unresolved input id, ...).
    #[error("schema: {0}")]
    Schema(String),

    /// The node graph contains a cycle.
    #[error("cycle involving node `{0}`")]
    Cycle(String),

    /// Tensor or weight dimensions are inconsistent.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// A rewrite pass was asked to fire on a structure it does not match.
    #[error("pattern mismatch: {0}")]
    PatternMismatch(String),

    /// An operation has no executable mapping on the configured overlay.
    #[error("unsupported op: {0}")]
    UnsupportedOp(String),

    /// No legal slicing exists (even a unit slice exceeds on-chip capacity).
    #[error("infeasible: {0}")]
    Infeasible(String),

    /// A value does not fit in its 32-bit instruction field.
    #[error("field overflow: {0}")]
    Overflow(String),

    /// The instruction byte stream is malformed.
    #[error("framing: {0}")]
    Framing(String),

    /// The instruction byte stream names a kernel the overlay does not have.
    #[error("unknown kernel id {0}")]
    UnknownKernel(u8),

    /// The simulator observed a read of memory that was never written.
    #[error("address fault: {0}")]
    AddressFault(String),

    /// Bad architecture description.
    #[error("arch config: {0}")]
    ArchConfig(String),
}

pub type Result<T> = std::result::Result<T, Error>;
