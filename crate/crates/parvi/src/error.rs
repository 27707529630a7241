//! Crate-wide error type.
//!
//! Every fallible operation in this crate returns [`Result`]. Validation
//! problems (bad domains, mismatched shapes, broken envelopes) are separated
//! from numerical failures (non-convergence, singular systems) so that
//! callers can map them to distinct exit codes.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Domain or grid construction rejected the inputs.
    #[error("invalid domain: {0}")]
    InvalidDomain(String),

    /// Resolution limits or node budgets exceeded.
    #[error("grid too large: {0}")]
    GridTooLarge(String),

    /// A grid function was used with a grid it does not belong to, or two
    /// fields of different lengths were combined.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// Matrix input violated a structural requirement (symmetry, finiteness).
    #[error("invalid matrix: {0}")]
    InvalidMatrix(String),

    /// Operator data violated its declared envelope or was malformed.
    #[error("invalid operator: {0}")]
    InvalidOperator(String),

    /// Obstacle family construction or evaluation failed.
    #[error("invalid obstacle: {0}")]
    InvalidObstacle(String),

    /// A coefficient or obstacle sampler produced a non-finite value.
    #[error("non-finite sample: {0}")]
    NonFiniteSample(String),

    /// The assembled scheme is not monotone and fail-closed mode is active.
    #[error("non-monotone discretization: {0}")]
    NotMonotone(String),

    /// Dirichlet data fails to dominate the obstacle on the boundary.
    #[error("boundary data incompatible with obstacle: {0}")]
    BoundaryIncompatible(String),

    /// An iterative solver ran out of its iteration budget.
    #[error("solver did not converge: {0}")]
    NonConvergence(String),

    /// A direct linear solve hit a (numerically) singular pivot.
    #[error("singular linear system: {0}")]
    SingularSystem(String),

    /// A parameter was outside its admissible range.
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}
