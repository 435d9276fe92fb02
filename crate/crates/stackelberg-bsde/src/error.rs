//! Crate-wide error type.
//!
//! Every solver failure carries enough context to locate the defect: the
//! failing time for integration and positivity problems, iteration histories
//! for fixed-point failures, and both branch diagnostics when the KKT case
//! split cannot be resolved.

use crate::leader::KktBranchDiagnostics;

/// Convenience alias used by every fallible operation in the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// All failure modes of the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A caller-supplied argument violates a documented precondition.
    #[error("invalid argument `{arg}`: {reason}")]
    InvalidArgument {
        /// Name of the offending argument.
        arg: &'static str,
        /// Why it was rejected.
        reason: String,
    },

    /// An integration produced a non-finite value.
    #[error("numerical blow-up at t = {time}: {context}")]
    NumericalBlowup {
        /// First grid time at which a non-finite value appeared.
        time: f64,
        /// Which equation or quantity blew up.
        context: String,
    },

    /// A standing positivity/nondegeneracy hypothesis failed along a solve.
    #[error("condition `{condition}` violated at t = {time} (margin {margin:.3e})")]
    ConstraintViolation {
        /// First grid time at which the condition failed.
        time: f64,
        /// The violated condition, e.g. `P + S₂ ≻ 0`.
        condition: String,
        /// Signed margin (minimum eigenvalue or |det|) observed there.
        margin: f64,
    },

    /// A convexity certificate required by a solver is false.
    #[error("objective not certified convex: {context} (margin {margin:.3e})")]
    NotConvex {
        /// Which certificate failed.
        context: String,
        /// The offending minimum eigenvalue.
        margin: f64,
    },

    /// An iterative solver exhausted its iteration budget.
    #[error("no convergence after {iterations} iterations (last update {last_delta:.3e})")]
    NoConvergence {
        /// Iterations performed.
        iterations: usize,
        /// Magnitude of the final update.
        last_delta: f64,
        /// Per-iteration update norms, for post-mortems.
        history: Vec<f64>,
    },

    /// A least-squares regression design matrix lost rank.
    #[error("ill-conditioned regression at time node {node}")]
    IllConditionedRegression {
        /// Grid node index of the failing regression.
        node: usize,
    },

    /// Neither KKT branch validated; both diagnostics are attached.
    #[error("KKT system indeterminate: {summary}")]
    KktIndeterminate {
        /// One-line description of what failed on each branch.
        summary: String,
        /// Full per-branch diagnostics.
        diagnostics: Box<KktBranchDiagnostics>,
    },

    /// The multiplier root-find never bracketed a sign change.
    #[error("no KKT multiplier bracket found up to λ = {lambda_max:.3e}")]
    KktBracketFailure {
        /// Largest multiplier value probed.
        lambda_max: f64,
    },

    /// A closed-form representation hypothesis failed (singular block).
    #[error("representation failure: {context}")]
    RepresentationFailure {
        /// Which representation block degenerated.
        context: String,
    },

    /// A brute-force enumeration would exceed its hard cap.
    #[error("instance too large: {context}")]
    InstanceTooLarge {
        /// What grew past the cap.
        context: String,
    },

    /// A wellposedness certificate failed and the caller did not override.
    #[error("wellposedness certificate refused: {context}")]
    CertificateRefused {
        /// The failing inequality and its margin.
        context: String,
    },

    /// Operand shapes disagree.
    #[error("dimension mismatch: {context}")]
    DimensionMismatch {
        /// Human-readable description of the mismatched shapes.
        context: String,
    },
}

impl Error {
    /// Shorthand constructor for [`Error::InvalidArgument`].
    pub fn invalid(arg: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidArgument {
            arg,
            reason: reason.into(),
        }
    }
}
