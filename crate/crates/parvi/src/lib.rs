//! Solver and verification toolkit for parabolic obstacle problems of the
//! form max{u_t + F(t, x, u, Du, D²u), g − u} = 0 on a space-time cylinder,
//! with Dirichlet data on the parabolic boundary and an obstacle given as a
//! maximum of smooth pieces.
//!
//! The operator F is in Bellman form: a maximum of linear elliptic operators
//! over a finite control set. Discretization uses a monotone implicit
//! finite-difference scheme marched backward from the terminal slice; the
//! obstacle is handled either directly (policy iteration with a stop
//! control), by smooth penalization, or by an incremental construction that
//! adds obstacle pieces one at a time.

pub mod discretize;
pub mod error;
pub mod geometry;
pub mod linalg;
pub mod obstacles;
pub mod operators;
pub mod solve;
pub mod verify;

pub use discretize::{assemble, check_monotone, residual, DiscreteOperator};
pub use error::{Error, Result};
pub use geometry::{build_grid, GridFunction, HalfSpace, NodeClass, NodeId, SpaceTimeGrid};
pub use obstacles::{
    compatibility_h, eval_obstacle, locate_kinks, truncate_family, ObstacleFamily, ObstaclePiece,
};
pub use solve::{
    brute_oracle, solve_direct, solve_incremental, solve_penalized, PenaltySchedule,
    SolveParams, SolveReport,
};

pub use verify::{
    check_comparison, discrete_sobolev_norm, fuzz_comparison, interior_estimate_check,
    kink_margin, modulus_probe, stability_run, ComparisonReport, EstimateReport,
    KinkMarginReport, ModulusReport, StabilityReport,
};

pub use operators::{
    eval_operator, pucci, validate_operator, BellmanOperator, Control, EllipticityEnvelope,
};
