//! Numerical solvers for open-loop Stackelberg equilibria of backward
//! linear-quadratic stochastic differential games.
//!
//! The game lives on a finite horizon `[0, T]` driven by a scalar Brownian
//! motion `W`.  The state is the adapted pair `(X, Z)` of a *backward* SDE
//!
//! ```text
//! dX(s) = [A X + B₁ u₁ + B₂ u₂ + C Z] ds + Z dW(s),     X(T) = ξ,
//! ```
//!
//! whose terminal condition `ξ` is itself a decision variable: the leader
//! commits to `(ξ, u₁)` — with `ξ` constrained pointwise to a closed convex
//! set `K` and in expectation by `⟨α, 𝔼ξ⟩ ≥ β` — anticipating the follower's
//! best response `ū₂`.  Both players pay quadratic costs in `(X, Z, uᵢ)` plus
//! terminal and initial weights.
//!
//! The crate computes the equilibrium in layers, mirroring how the theory
//! decouples the problem:
//!
//! * [`core`] — time grids, matrix/vector paths, 4th-order deterministic ODE
//!   integration, fundamental matrices, Brownian scenario ensembles.
//! * [`constraints`] — the terminal constraint set, support functionals,
//!   feasibility classification, and metric projections onto `K`.
//! * [`riccati`] — backward Riccati solvers: the follower's and leader's
//!   equations, and the decoupling equations of the two multiplier branches,
//!   with fundamental-matrix closed-form cross-checks.
//! * [`follower`] — the follower's best response: Hamiltonian system,
//!   stationarity residuals, and cost evaluation.
//! * [`leader`] — the leader's problem: KKT multiplier logic, the λ = 0 and
//!   λ > 0 branches, the projection-coupled terminal condition, and assembly
//!   of the full equilibrium.
//! * [`bfsde`] — a discounted-norm Picard solver for coupled backward-forward
//!   systems with mixed initial-terminal conditions, plus computable
//!   wellposedness certificates.
//! * [`oracle`] — an independent discrete-time bilevel QP used as ground
//!   truth for the continuous solvers.
//!
//! Everything is deterministic given a seed; scenario ensembles are
//! reproducible and all solver output is immutable once returned.

pub mod bfsde;
pub mod constraints;
pub mod core;
pub mod error;
pub mod follower;
pub mod leader;
pub mod oracle;
pub mod riccati;

pub use error::{Error, Result};
