//! Error type shared across the crate.

use crate::semiring::SemiringKind;

/// Errors produced by tensor operations, chart construction and
/// distribution queries.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Two semiring values of different kinds were combined.
    #[error("semiring kind mismatch: {left:?} vs {right:?}")]
    KindMismatch {
        left: SemiringKind,
        right: SemiringKind,
    },

    /// Tensor shapes are incompatible for the requested operation.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// An axis index was out of range for a tensor's rank.
    #[error("axis {axis} out of range for rank {rank}")]
    AxisOutOfRange { axis: usize, rank: usize },

    /// A potential value was NaN or otherwise unusable.
    #[error("invalid potential: {0}")]
    InvalidPotential(String),

    /// A model descriptor violates its invariants.
    #[error("invalid model descriptor: {0}")]
    InvalidDescriptor(String),

    /// A part vector does not encode a legal structure of its model.
    #[error("invalid structure: {0}")]
    InvalidStructure(String),

    /// The distribution assigns zero weight to every structure, so the
    /// requested query has no answer.
    #[error("empty distribution: no structure has finite score")]
    DistributionEmpty,

    /// Brute-force enumeration was refused because the structure space
    /// is too large.
    #[error("enumeration refused: estimated {estimated:.3e} structures exceeds limit {limit:.3e}")]
    EnumerationTooLarge { estimated: f64, limit: f64 },

    /// An internal invariant was violated. Indicates a bug.
    #[error("internal invariant breach: {0}")]
    Internal(String),
}

pub type Result<T> = std::result::Result<T, Error>;
