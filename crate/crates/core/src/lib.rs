//! Robust state estimation with singular covariance models.
//!
//! Classical smoothers weight residuals by inverse covariances, which breaks
//! down as soon as a process or measurement covariance is rank deficient —
//! exactly the situation created by deterministic integrals, constant biases,
//! correlated noise, and exact constraints. This crate keeps covariances in
//! square-root form and treats the whitening relations as equality
//! constraints, so rank deficiency costs nothing: the smoothing problem
//! becomes a convex program over the stacked innovations, residuals, and
//! states, solved by an operator-splitting loop whose per-iteration cost is
//! linear in the horizon.
//!
//! Modules:
//! - [`penalties`]: piecewise linear-quadratic losses, box indicators, and
//!   their proximal operators.
//! - [`model`]: the problem description, validation, and the singular-model
//!   builders (bias, correlated noise, exact rows).
//! - [`blocklinalg`]: block bidiagonal constraint assembly, the block
//!   tridiagonal Gram matrix, its Cholesky factorization, and affine
//!   projections.
//! - [`solver`]: the splitting iteration, warm starts, and optimality
//!   diagnostics.
//! - [`navigation`]: the IMU + acoustic-fix tracking model with bias states
//!   and discretization-aware losses.
//! - [`reference`]: independent oracles (Kalman/RTS, dense KKT, scalar prox
//!   search, pseudo-inverse baseline) used by the test suites.

pub mod blocklinalg;
mod error;
pub mod model;
pub mod navigation;
pub mod penalties;
pub mod reference;
pub mod solver;
mod spectral;

pub use error::{Error, Result};
pub use model::{BlockLayout, Problem, StackedVector, TimeStep};
pub use penalties::{BlockTerm, Penalty, PenaltyKind, SeparablePenalty};
pub use solver::{solve, warm_start, SolveResult, SolverConfig};
