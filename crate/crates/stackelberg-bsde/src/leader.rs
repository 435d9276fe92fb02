//! Leader-side equilibrium solvers and KKT verification.
//!
//! The leader chooses the terminal value `ξ` of the backward state together
//! with a running control `u₁`, anticipating the follower's best response
//! `ū₂ = R₂₂⁻¹B₂ᵀȲ`.  Three constraint regimes are solved:
//!
//! - **affine only** ([`solve_p2_affine`]): the mean constraint
//!   `⟨α, 𝔼ξ⟩ ≥ β` with no pointwise set.  The KKT multiplier `λ ≥ 0`
//!   reduces the problem to two candidate branches — `λ = 0` (constraint
//!   slack) and `λ > 0` (constraint binding) — each solved in closed,
//!   deterministic form through a decoupling field of the stacked
//!   mean/fluctuation system.
//! - **pointwise only** ([`solve_p1_pointwise`]): `ξ ∈ K` scenario-wise.
//!   The optimality system is a coupled forward–backward SDE whose terminal
//!   condition projects onto `K` in the `G₁` metric; it is solved by Picard
//!   iteration with least-squares conditional expectations.
//! - **both** ([`solve_p_general`]): the affine constraint is dualised and
//!   the scalar complementarity condition `φ(λ) = β − ⟨α, 𝔼ξ̄_λ⟩ = 0` is
//!   root-found over the pointwise solver, `λ ≥ 0`.
//!
//! ```text
//! stacked optimality system (forward 𝕐 = (g; Ȳ), backward 𝕏 = (X̄; h)):
//!     dg = [−Aᵀg + Q₁X̄ + Q₂h] ds + [−Cᵀg + S₁Z̄ + S₂q] dW
//!     dȲ = [−AᵀȲ + Q₂X̄] ds + [−CᵀȲ + S₂Z̄] dW
//!     dX̄ = [B₁R₁₁⁻¹B₁ᵀ g + B₂R₂₂⁻¹B₂ᵀ Ȳ + AX̄ + CZ̄] ds + Z̄ dW
//!     dh = [B₁R₁₁⁻¹B₁ᵀ g + Ah + Cq] ds + q dW        (g-kernel, h-channel)
//!     𝕐(0) = (H₁X̄(0) + H₂h(0); H₂X̄(0)),   h(T) = 0,
//!     X̄(T) = Proj_K[G₁⁻¹(−g(T) + λα)]    (projection in the G₁ metric).
//! ```
//!
//! The multiplier logic follows the saddle-point characterisation: a
//! candidate `(ξ̄, λ)` is an equilibrium iff `λ ≥ 0`, the mean constraint
//! holds, and `λ·(β − ⟨α, 𝔼ξ̄⟩) = 0`.  [`verify_kkt`] re-checks these
//! conditions (plus a saddle probe in the multiplier direction) on any
//! reported solution without re-solving.
//!
//! Wellposedness and convexity certificates are *sufficient only*: an
//! instance refused by [`solve_p1_pointwise`] may still possess a perfectly
//! good fixed point (small horizons in particular).  The
//! [`PicardOptions::override_certificate`] flag skips the gates and lets the
//! iteration speak for itself; divergence is then reported as
//! `NoConvergence` with the norm history.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::bfsde::{
    certify, leader_fixed_point_system, picard_solve, BfsdeSolution, CertifyInput,
    CertifyVariant, PicardTrace, DEFAULT_REGRESSION_DEGREE,
};
use crate::constraints::{classify_feasibility, ConstraintSpec, FeasibilityClass};
use crate::core::{
    integrate_linear_ode, spectral_norm, Direction, MatrixPath, ScenarioEnsemble, TimeGrid,
    VectorPath,
};
use crate::error::{Error, Result};
use crate::follower::{evaluate_costs, GameCoefficients, TerminalControl};
use crate::riccati::{
    assemble_check_blocks, assemble_tilde_blocks, leader_convexity_certificate,
    solve_decoupling_check, solve_decoupling_tilde, solve_sre2,
};

// ======================================================================
// Tolerances
// ======================================================================

/// Primal validation level for the zero branch: the `λ = 0` candidate is
/// accepted when its constraint margin `β − ⟨α, 𝔼ξ̄⟩` does not exceed this.
pub const KKT_PRIMAL_TOL: f64 = 1e-9;

/// Dual validation level: the binding branch is accepted when its
/// multiplier satisfies `λ ≥ −KKT_DUAL_TOL` (tiny negative values are
/// boundary roundoff, not sign violations).
pub const KKT_DUAL_TOL: f64 = 1e-9;

/// Root tolerance on the complementarity function `φ(λ) = β − ⟨α, 𝔼ξ̄_λ⟩`
/// in [`solve_p_general`]; the bisection stops once `|φ| falls below it.
pub const PHI_ROOT_TOL: f64 = 1e-9;

/// Relative bracket-width stop for the `λ` bisection.
pub const LAMBDA_WIDTH_TOL: f64 = 1e-9;

/// The bracket expansion doubles the initial guess at most this many times
/// (a `2¹⁶` total magnification) before giving up with `KktBracketFailure`.
pub const LAMBDA_DOUBLING_CAP: u32 = 16;

/// Hard iteration cap on the `λ` bisection (it normally stops on
/// [`PHI_ROOT_TOL`] or [`LAMBDA_WIDTH_TOL`] long before).
pub const BISECTION_MAX_ITER: usize = 200;

// ======================================================================
// Types
// ======================================================================

/// Which KKT branch produced the reported solution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Branch {
    /// Affine constraint slack at the unconstrained optimum (`λ = 0`).
    Zero,
    /// Affine constraint binding with multiplier `λ > 0`.
    Positive,
    /// Pointwise constraint only; no multiplier in play.
    PointwiseOnly,
    /// Both constraints active through the scalar root-find.
    General,
}

/// Complementarity summary attached to every equilibrium solution.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct KktReport {
    /// `λ · (β − ⟨α, 𝔼ξ̄⟩)` — zero at an exact KKT point.
    pub slackness: f64,
    /// `β − ⟨α, 𝔼ξ̄⟩` — non-positive iff the mean constraint holds.
    pub primal_margin: f64,
    /// `λ ≥ −`[`KKT_DUAL_TOL`].
    pub dual_ok: bool,
}

/// Outcome of the `λ = 0` candidate.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct ZeroBranchReport {
    /// Whether the unconstrained decoupling field existed (the branch's
    /// machinery ran to completion).
    pub solved: bool,
    /// Constraint margin `β − ⟨α, 𝔼ξ̄₀⟩` of the candidate; the branch
    /// validates iff this is `≤` [`KKT_PRIMAL_TOL`].
    pub primal_margin: f64,
}

/// Outcome of the binding (`λ > 0`) candidate.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct PositiveBranchReport {
    /// Whether the constrained decoupling field and multiplier were
    /// computed.
    pub solved: bool,
    /// The computed multiplier (`NaN` when unsolved).
    pub lambda: f64,
    /// Margin of the dual sign condition, `λ` itself; the branch validates
    /// iff this is `≥ −`[`KKT_DUAL_TOL`].
    pub dual_margin: f64,
}

/// Both branch outcomes plus the selection, reported — not silently
/// resolved — even when the branches disagree about validity.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct KktBranchDiagnostics {
    /// The `λ = 0` candidate.
    pub zero_branch: ZeroBranchReport,
    /// The `λ > 0` candidate.
    pub positive_branch: PositiveBranchReport,
    /// The branch the solver returned; `None` inside a both-fail error.
    pub chosen: Option<Branch>,
}

/// Options for the Picard iteration behind the pointwise and general
/// solvers.
#[derive(Debug, Clone)]
pub struct PicardOptions {
    /// Convergence tolerance on the discounted update norm.
    pub tol: f64,
    /// Iteration cap before `NoConvergence`.
    pub max_iter: usize,
    /// Discount rate for the update norms; `None` selects the
    /// certificate-derived rate (falling back to `0` when the certificate
    /// has no preference).
    pub rho: Option<f64>,
    /// Polynomial degree of the conditional-expectation regression.
    pub regression_degree: usize,
    /// Skip the wellposedness and convexity gates.  The gates are
    /// sufficient conditions only; overriding attempts the iteration on
    /// instances the certificates cannot vouch for.
    pub override_certificate: bool,
}

impl Default for PicardOptions {
    fn default() -> Self {
        PicardOptions {
            tol: 1e-9,
            max_iter: 200,
            rho: None,
            regression_degree: DEFAULT_REGRESSION_DEGREE,
            override_certificate: false,
        }
    }
}

/// An open-loop leader–follower equilibrium with its diagnostics.
///
/// All paths carry one scenario for the deterministic (affine-only) route
/// and one path per ensemble scenario for the stochastic routes.  For
/// `C ≠ 0` the affine-only route computes the exact *means* of every
/// process (the linear system closes at the level of expectations), and
/// the reported costs are those of the deterministic mean trajectory —
/// fluctuation variance around it is not simulated on that route.
#[derive(Debug, Clone)]
pub struct EquilibriumSolution {
    /// KKT multiplier of the mean constraint (`0` when slack or absent).
    pub lambda: f64,
    /// Forward adjoint of the leader system (dimension `n`).
    pub g: VectorPath,
    /// Follower adjoint `Ȳ` (dimension `n`).
    pub ybar: VectorPath,
    /// Equilibrium state `X̄` (dimension `n`).
    pub xbar: VectorPath,
    /// Martingale integrand `Z̄` of the state (dimension `n`).
    pub zbar: VectorPath,
    /// Backward adjoint `h` of the leader system (dimension `n`).
    pub h: VectorPath,
    /// Martingale integrand `q` of `h` (dimension `n`).
    pub q: VectorPath,
    /// The leader's terminal control `ξ̄`.
    pub xi: TerminalControl,
    /// Leader control `ū₁ = R₁₁⁻¹B₁ᵀg` (dimension `m₁`).
    pub u1: VectorPath,
    /// Follower response `ū₂ = R₂₂⁻¹B₂ᵀȲ` (dimension `m₂`).
    pub u2: VectorPath,
    /// Leader cost at the equilibrium.
    pub j1: f64,
    /// Follower cost at the equilibrium.
    pub j2: f64,
    /// Complementarity summary.
    pub kkt_report: KktReport,
    /// Which KKT branch the solution came from.
    pub branch: Branch,
    /// Branch-level diagnostics where a branch decision was made
    /// (affine-only and general routes); `None` for the purely pointwise
    /// route, which has no multiplier logic.
    pub branch_diagnostics: Option<KktBranchDiagnostics>,
    /// Convergence record of the Picard iteration (stochastic routes).
    pub picard_trace: Option<PicardTrace>,
    /// Sign-change brackets `(λ_lo, λ_hi)` of `φ` observed among all probes
    /// of the general route's root-find, in increasing `λ`.  The solver
    /// resolves the smallest bracket; additional entries flag a
    /// non-monotone complementarity function worth inspecting.
    pub phi_sign_changes: Vec<(f64, f64)>,
}

/// Report of [`verify_kkt`]: each condition with its measured margin.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct KktVerification {
    /// Multiplier the solution reported.
    pub lambda: f64,
    /// `β − ⟨α, 𝔼ξ̄⟩` (0 when the affine constraint is disabled).
    pub primal_margin: f64,
    /// `λ · primal_margin`.
    pub slackness: f64,
    /// `λ ≥ −tolerance`.
    pub dual_ok: bool,
    /// `primal_margin ≤ tolerance`.
    pub primal_ok: bool,
    /// `|slackness| ≤ tolerance`.
    pub slackness_ok: bool,
    /// `max_{λ'} (λ' − λ)·primal_margin` over the probes
    /// `λ' ∈ {0, λ/2, 2λ}` — the Lagrangian gain available by moving the
    /// multiplier alone; positive gain exposes a non-saddle point.
    pub saddle_margin: f64,
    /// `saddle_margin ≤ tolerance`.
    pub saddle_ok: bool,
    /// Conjunction of the four checks.
    pub passed: bool,
}

// ======================================================================
// Shared assembly helpers
// ======================================================================

/// Nodewise control kernels `R(k)⁻¹B(k)ᵀ`.
fn kernel_ops(weight: &MatrixPath, channel: &MatrixPath) -> Result<Vec<DMatrix<f64>>> {
    let nodes = weight.values.len();
    let mut ops = Vec::with_capacity(nodes);
    for k in 0..nodes {
        let r = weight.at(k).clone();
        let inv = r.cholesky().map(|c| c.inverse()).ok_or_else(|| {
            Error::invalid(
                "coeffs",
                format!("control weight must be positive definite at node {k}"),
            )
        })?;
        ops.push(inv * channel.at(k).transpose());
    }
    Ok(ops)
}

/// Applies nodewise operators to every scenario of a path.
fn apply_kernel(ops: &[DMatrix<f64>], path: &VectorPath, grid: &TimeGrid) -> VectorPath {
    let out_dim = ops[0].nrows();
    let mut out = VectorPath::zeros(grid, path.scenarios, out_dim);
    for m in 0..path.scenarios {
        for k in 0..grid.len() {
            let v = &ops[k] * path.at(m, k);
            out.set_node(m, k, v.as_slice());
        }
    }
    out
}

/// Splits a `2n`-dimensional path into its upper and lower halves.
fn split_halves(path: &VectorPath, n: usize, grid: &TimeGrid) -> (VectorPath, VectorPath) {
    let mut top = VectorPath::zeros(grid, path.scenarios, n);
    let mut bottom = VectorPath::zeros(grid, path.scenarios, n);
    for m in 0..path.scenarios {
        for k in 0..grid.len() {
            let node = path.node(m, k);
            top.set_node(m, k, &node[..n]);
            bottom.set_node(m, k, &node[n..]);
        }
    }
    (top, bottom)
}

/// Extracts the terminal control from the backward state's last node.
fn terminal_control(xbar: &VectorPath, ensemble: &ScenarioEnsemble) -> TerminalControl {
    let last = xbar.grid.len() - 1;
    if ensemble.paths == 1 {
        TerminalControl::Deterministic(xbar.at(0, last))
    } else {
        let values = (0..ensemble.paths).map(|m| xbar.at(m, last)).collect();
        TerminalControl::Sampled {
            values,
            seed: ensemble.seed,
        }
    }
}

/// Inverse of the terminal weight, which every route needs.
fn g1_inverse(g1: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    g1.clone()
        .cholesky()
        .map(|c| c.inverse())
        .ok_or_else(|| Error::invalid("coeffs", "terminal weight must be positive definite"))
}

/// Segment `[start, start+len)` of a single-column matrix as a vector.
fn seg(column: &DMatrix<f64>, start: usize, len: usize) -> DVector<f64> {
    DVector::from_fn(len, |i, _| column[(start + i, 0)])
}

/// Builds the full solution record from a stochastic fixed point.
#[allow(clippy::too_many_arguments)]
fn assemble_stochastic_solution(
    coeffs: &GameCoefficients,
    spec: &ConstraintSpec,
    grid: &TimeGrid,
    ensemble: &ScenarioEnsemble,
    sol: BfsdeSolution,
    lambda: f64,
    branch: Branch,
    branch_diagnostics: Option<KktBranchDiagnostics>,
    phi_sign_changes: Vec<(f64, f64)>,
) -> Result<EquilibriumSolution> {
    let n = coeffs.n;
    let (g, ybar) = split_halves(&sol.y, n, grid);
    let (xbar, h) = split_halves(&sol.x, n, grid);
    let (zbar, q) = split_halves(&sol.z, n, grid);
    let u1 = apply_kernel(&kernel_ops(&coeffs.r11, &coeffs.b1)?, &g, grid);
    let u2 = apply_kernel(&kernel_ops(&coeffs.r22, &coeffs.b2)?, &ybar, grid);
    let xi = terminal_control(&xbar, ensemble);
    let (j1, j2) = evaluate_costs(coeffs, &xi, &u1, &u2, grid, ensemble)?;
    let primal_margin = if spec.affine_enabled {
        spec.beta - spec.alpha.dot(&xi.mean())
    } else {
        0.0
    };
    let kkt_report = KktReport {
        slackness: lambda * primal_margin,
        primal_margin,
        dual_ok: lambda >= -KKT_DUAL_TOL,
    };
    Ok(EquilibriumSolution {
        lambda,
        g,
        ybar,
        xbar,
        zbar,
        h,
        q,
        xi,
        u1,
        u2,
        j1,
        j2,
        kkt_report,
        branch,
        branch_diagnostics,
        picard_trace: Some(sol.trace),
        phi_sign_changes,
    })
}

/// Sufficient-condition gates shared by the stochastic routes.
///
/// Both gates are *sufficient only*; a refusal names the failing
/// certificate and points at the override flag.
fn certificate_gate(
    coeffs: &GameCoefficients,
    system: &crate::bfsde::BfsdeSystem,
    grid: &TimeGrid,
) -> Result<()> {
    let wp = certify(&CertifyInput::System(system), CertifyVariant::General, None)?;
    if !wp.verdict {
        let failing = wp
            .condition_log
            .iter()
            .find(|c| !c.holds)
            .map(|c| format!("'{}' (margin {:.3e})", c.name, c.margin))
            .unwrap_or_else(|| "unknown condition".to_string());
        return Err(Error::CertificateRefused {
            context: format!(
                "fixed-point wellposedness (discounting criterion) fails at {failing}; \
                 the criterion is sufficient only — set override_certificate to attempt \
                 the iteration regardless"
            ),
        });
    }
    let sre2 = solve_sre2(coeffs, grid).map_err(|e| Error::CertificateRefused {
        context: format!(
            "leader convexity certificate could not be evaluated ({e}); \
             set override_certificate to skip the gate"
        ),
    })?;
    let cert = leader_convexity_certificate(&sre2, &coeffs.h1)?;
    if !cert.convex {
        return Err(Error::CertificateRefused {
            context: format!(
                "leader cost convexity certificate fails (minimum eigenvalue margin \
                 {:.3e}); set override_certificate to attempt the solve regardless",
                cert.margin
            ),
        });
    }
    Ok(())
}

// ======================================================================
// Affine-only route
// ======================================================================

/// Deterministic output of the binding branch: exact means of every
/// process plus the multiplier.
struct PositiveOutcome {
    lambda: f64,
    g: VectorPath,
    ybar: VectorPath,
    xbar: VectorPath,
    zbar: VectorPath,
    h: VectorPath,
    q: VectorPath,
    xi: DVector<f64>,
}

/// Solves the binding branch through the constrained decoupling field.
///
/// The stacked mean/fluctuation system is reduced by the ansatz
/// `X̌ = P̌Y̌ᵇ + p̌` with `Y̌ᵇ = Y̌ − ȞX̌`, `Y̌ᵇ(0) = 0`; substituting the
/// martingale representation `Ž = −(I + P̌Č₁ᵇ)⁻¹P̌[(Ǎ₁ + B̌₁ᵇP̌)Y̌ᵇ + B̌₁ᵇp̌]`
/// closes the mean dynamics into a linear ODE:
///
/// ```text
/// d𝔼Y̌ᵇ/dt = −[Ǎᵇ + B̌ᵇP̌ − (Čᵇ+Ďᵇ)(I+P̌Č₁ᵇ)⁻¹P̌(Ǎ₁+B̌₁ᵇP̌)] 𝔼Y̌ᵇ
///           −[B̌ᵇ − (Čᵇ+Ďᵇ)(I+P̌Č₁ᵇ)⁻¹P̌B̌₁ᵇ] p̌,        𝔼Y̌ᵇ(0) = 0.
/// ```
///
/// Expectations close exactly because all coefficients are deterministic;
/// for `C ≡ 0` the correction terms vanish identically.
fn positive_branch(
    coeffs: &GameCoefficients,
    grid: &TimeGrid,
    alpha: &DVector<f64>,
    beta: f64,
) -> Result<PositiveOutcome> {
    let n = coeffs.n;
    let n4 = 4 * n;
    let nodes = grid.len();
    let blocks = assemble_check_blocks(coeffs, grid, alpha, beta)?;
    let chk = solve_decoupling_check(&blocks, grid)?;
    let bl = blocks.check.as_ref().expect("assembled above");
    let diffusion_free = coeffs.c_is_zero();

    // Closed-loop mean coefficients, tabulated nodewise so the integrator
    // interpolates them exactly like every other coefficient path.
    let mut lin_nodes = Vec::with_capacity(nodes);
    let mut off_nodes = Vec::with_capacity(nodes);
    let mut gates = Vec::with_capacity(nodes);
    for k in 0..nodes {
        let p = chk.p.p.at(k);
        let pm = chk.p_small.at(k);
        let mut lin = bl.a_bar.at(k) + bl.b_bar.at(k) * p;
        let mut off = bl.b_bar.at(k) * pm;
        if diffusion_free {
            gates.push(None);
        } else {
            let gate = DMatrix::identity(n4, n4) + p * bl.c1_bar.at(k);
            let gate_inv = gate.try_inverse().ok_or_else(|| Error::NumericalBlowup {
                time: grid.nodes[k],
                context: "martingale gate I + P̌Č₁ᵇ singular during mean reconstruction"
                    .to_string(),
            })?;
            let couple = (bl.c_bar.at(k) + bl.d_bar.at(k)) * &gate_inv * p;
            lin -= &couple * (bl.a1.at(k) + bl.b1_bar.at(k) * p);
            off -= couple * (bl.b1_bar.at(k) * pm);
            gates.push(Some(gate_inv));
        }
        lin_nodes.push(lin);
        off_nodes.push(off);
    }
    let lin = MatrixPath {
        grid: grid.clone(),
        values: lin_nodes,
    };
    let off = MatrixPath {
        grid: grid.clone(),
        values: off_nodes,
    };
    let mean_yb = integrate_linear_ode(
        |t, y| -(lin.interp(t) * y + off.interp(t)),
        DMatrix::zeros(n4, 1),
        Direction::Forward,
        grid,
    )?;

    // Reconstruct the original means channel by channel.  The stacked
    // ordering is (𝔼·, fluctuation-mean ≡ 0) per block, so each original
    // mean is the sum of its two channels.
    let mut g = VectorPath::zeros(grid, 1, n);
    let mut ybar = VectorPath::zeros(grid, 1, n);
    let mut xbar = VectorPath::zeros(grid, 1, n);
    let mut h = VectorPath::zeros(grid, 1, n);
    let mut zbar = VectorPath::zeros(grid, 1, n);
    let mut q = VectorPath::zeros(grid, 1, n);
    for k in 0..nodes {
        let p = chk.p.p.at(k);
        let pm = chk.p_small.at(k);
        let yb = mean_yb.at(k);
        let xck = p * yb + pm;
        let yck = yb + &bl.h * &xck;
        xbar.set_node(0, k, (seg(&xck, 0, n) + seg(&xck, n, n)).as_slice());
        h.set_node(0, k, (seg(&xck, 2 * n, n) + seg(&xck, 3 * n, n)).as_slice());
        g.set_node(0, k, (seg(&yck, 0, n) + seg(&yck, n, n)).as_slice());
        ybar.set_node(0, k, (seg(&yck, 2 * n, n) + seg(&yck, 3 * n, n)).as_slice());
        if let Some(gate_inv) = &gates[k] {
            let mz = -(gate_inv
                * p
                * ((bl.a1.at(k) + bl.b1_bar.at(k) * p) * yb + bl.b1_bar.at(k) * pm));
            zbar.set_node(0, k, (seg(&mz, 0, n) + seg(&mz, n, n)).as_slice());
            q.set_node(0, k, (seg(&mz, 2 * n, n) + seg(&mz, 3 * n, n)).as_slice());
        }
    }

    // Multiplier and terminal control from the stationarity condition
    // G₁ξ̄ + g(T) = λα with ⟨α, 𝔼ξ̄⟩ = β.
    let g1_inv = g1_inverse(&coeffs.g1)?;
    let denom = alpha.dot(&(&g1_inv * alpha));
    let g_terminal = g.at(0, nodes - 1);
    let lambda = (beta + alpha.dot(&(&g1_inv * &g_terminal))) / denom;
    let xi = &g1_inv * (-&g_terminal + lambda * alpha);
    // Pin the state's terminal node to the stationarity value; the
    // integrated terminal differs from it only by the ODE defect.
    xbar.set_node(0, nodes - 1, xi.as_slice());

    Ok(PositiveOutcome {
        lambda,
        g,
        ybar,
        xbar,
        zbar,
        h,
        q,
        xi,
    })
}

/// Assembles the deterministic (affine route) solution record.
#[allow(clippy::too_many_arguments)]
fn assemble_deterministic_solution(
    coeffs: &GameCoefficients,
    spec: &ConstraintSpec,
    grid: &TimeGrid,
    lambda: f64,
    g: VectorPath,
    ybar: VectorPath,
    xbar: VectorPath,
    zbar: VectorPath,
    h: VectorPath,
    q: VectorPath,
    xi: DVector<f64>,
    branch: Branch,
    diagnostics: KktBranchDiagnostics,
) -> Result<EquilibriumSolution> {
    let u1 = apply_kernel(&kernel_ops(&coeffs.r11, &coeffs.b1)?, &g, grid);
    let u2 = apply_kernel(&kernel_ops(&coeffs.r22, &coeffs.b2)?, &ybar, grid);
    let xi = TerminalControl::Deterministic(xi);
    let ensemble = ScenarioEnsemble::degenerate(grid, 1);
    let (j1, j2) = evaluate_costs(coeffs, &xi, &u1, &u2, grid, &ensemble)?;
    let primal_margin = spec.beta - spec.alpha.dot(&xi.mean());
    let kkt_report = KktReport {
        slackness: lambda * primal_margin,
        primal_margin,
        dual_ok: lambda >= -KKT_DUAL_TOL,
    };
    Ok(EquilibriumSolution {
        lambda,
        g,
        ybar,
        xbar,
        zbar,
        h,
        q,
        xi,
        u1,
        u2,
        j1,
        j2,
        kkt_report,
        branch,
        branch_diagnostics: Some(diagnostics),
        picard_trace: None,
        phi_sign_changes: Vec::new(),
    })
}

/// Solves the affine-constrained problem (`⟨α, 𝔼ξ⟩ ≥ β`, no pointwise
/// set) by KKT branch selection over two deterministic decoupling solves.
///
/// The `λ = 0` branch of this model is identically zero (the optimality
/// system is linear and homogeneous), so its constraint margin is `β`
/// itself; the decoupling field of the unconstrained system is still
/// solved as an existence gate.  The binding branch reduces the
/// mean-augmented system to a `4n` decoupling field and recovers the exact
/// means of every process plus the multiplier
/// `λ = (β + ⟨α, G₁⁻¹𝔼g(T)⟩) / ⟨α, G₁⁻¹α⟩`.
///
/// Exactly one branch is chosen when either validates.  When both validate
/// (boundary case `β ≈ 0`) the zero branch is returned and the coincidence
/// is visible in [`EquilibriumSolution::branch_diagnostics`].  For `C ≠ 0`
/// the reported paths are exact means and the reported costs are those of
/// the mean trajectory; see [`EquilibriumSolution`].
///
/// # Errors
///
/// `InvalidArgument` when the spec is not affine-only or a determinant
/// hypothesis of the constrained assembly fails; `KktIndeterminate` when
/// both branches solve but neither validates; solver errors propagate from
/// whichever branch the level `β` makes decisive.
pub fn solve_p2_affine(
    coeffs: &GameCoefficients,
    spec: &ConstraintSpec,
    grid: &TimeGrid,
) -> Result<EquilibriumSolution> {
    coeffs.validate()?;
    spec.validate()?;
    if !spec.affine_enabled {
        return Err(Error::invalid(
            "spec",
            "the affine route requires the mean constraint to be enabled",
        ));
    }
    if spec.pointwise_enabled {
        return Err(Error::invalid(
            "spec",
            "the affine route handles the mean constraint only; \
             use solve_p_general when a pointwise set is also active",
        ));
    }
    if spec.k.dim() != coeffs.n {
        return Err(Error::DimensionMismatch {
            context: format!(
                "constraint dimension {} does not match the state dimension {}",
                spec.k.dim(),
                coeffs.n
            ),
        });
    }
    let n = coeffs.n;
    let zero_level_ok = spec.beta <= KKT_PRIMAL_TOL;

    if zero_level_ok {
        // The zero branch is decisive; its machinery must exist.
        assemble_tilde_blocks(coeffs, grid).and_then(|b| solve_decoupling_tilde(&b, grid))?;
        // Binding branch attempted purely for the diagnostics record.
        let positive_report = match positive_branch(coeffs, grid, &spec.alpha, spec.beta) {
            Ok(out) => PositiveBranchReport {
                solved: true,
                lambda: out.lambda,
                dual_margin: out.lambda,
            },
            Err(_) => PositiveBranchReport {
                solved: false,
                lambda: f64::NAN,
                dual_margin: f64::NEG_INFINITY,
            },
        };
        let diagnostics = KktBranchDiagnostics {
            zero_branch: ZeroBranchReport {
                solved: true,
                primal_margin: spec.beta,
            },
            positive_branch: positive_report,
            chosen: Some(Branch::Zero),
        };
        let zeros = || VectorPath::zeros(grid, 1, n);
        return assemble_deterministic_solution(
            coeffs,
            spec,
            grid,
            0.0,
            zeros(),
            zeros(),
            zeros(),
            zeros(),
            zeros(),
            zeros(),
            DVector::zeros(n),
            Branch::Zero,
            diagnostics,
        );
    }

    // The binding branch is decisive; assembly and solve errors (including
    // the determinant hypotheses) are fatal here.
    let out = positive_branch(coeffs, grid, &spec.alpha, spec.beta)?;
    let zero_report = ZeroBranchReport {
        solved: assemble_tilde_blocks(coeffs, grid)
            .and_then(|b| solve_decoupling_tilde(&b, grid))
            .is_ok(),
        primal_margin: spec.beta,
    };
    if out.lambda >= -KKT_DUAL_TOL {
        let diagnostics = KktBranchDiagnostics {
            zero_branch: zero_report,
            positive_branch: PositiveBranchReport {
                solved: true,
                lambda: out.lambda,
                dual_margin: out.lambda,
            },
            chosen: Some(Branch::Positive),
        };
        return assemble_deterministic_solution(
            coeffs,
            spec,
            grid,
            out.lambda,
            out.g,
            out.ybar,
            out.xbar,
            out.zbar,
            out.h,
            out.q,
            out.xi,
            Branch::Positive,
            diagnostics,
        );
    }
    let diagnostics = KktBranchDiagnostics {
        zero_branch: zero_report,
        positive_branch: PositiveBranchReport {
            solved: true,
            lambda: out.lambda,
            dual_margin: out.lambda,
        },
        chosen: None,
    };
    Err(Error::KktIndeterminate {
        summary: format!(
            "neither KKT branch validates: zero-branch constraint margin {:.3e} > 0 \
             and binding-branch multiplier {:.3e} < 0",
            spec.beta, out.lambda
        ),
        diagnostics: Box::new(diagnostics),
    })
}

// ======================================================================
// Pointwise route
// ======================================================================

/// Solves the pointwise-constrained problem (`ξ ∈ K` scenario-wise, no
/// mean constraint) by Picard iteration on the projected optimality
/// system.
///
/// Unless [`PicardOptions::override_certificate`] is set, two sufficient
/// gates run first: the discounting wellposedness certificate on the
/// assembled system and the leader convexity certificate through the
/// stacked Riccati flow.  Either failure refuses the solve with the gate
/// named — refusal is *not* evidence that no equilibrium exists.
///
/// # Errors
///
/// `CertificateRefused` as above; `NoConvergence` with the norm history
/// when the iteration stalls; `InvalidArgument` for a spec that is not
/// pointwise-only or dimension mismatches.
pub fn solve_p1_pointwise(
    coeffs: &GameCoefficients,
    spec: &ConstraintSpec,
    grid: &TimeGrid,
    ensemble: &ScenarioEnsemble,
    options: &PicardOptions,
) -> Result<EquilibriumSolution> {
    coeffs.validate()?;
    spec.validate()?;
    if !spec.pointwise_enabled {
        return Err(Error::invalid(
            "spec",
            "the pointwise route requires the pointwise constraint to be enabled",
        ));
    }
    if spec.affine_enabled {
        return Err(Error::invalid(
            "spec",
            "the pointwise route has no multiplier logic; \
             use solve_p_general when the mean constraint is also active",
        ));
    }
    let system = leader_fixed_point_system(coeffs, &spec.k, None, grid)?;
    if !options.override_certificate {
        certificate_gate(coeffs, &system, grid)?;
    }
    let sol = picard_solve(
        &system,
        grid,
        ensemble,
        options.rho,
        options.tol,
        options.max_iter,
        options.regression_degree,
    )?;
    assemble_stochastic_solution(
        coeffs,
        spec,
        grid,
        ensemble,
        sol,
        0.0,
        Branch::PointwiseOnly,
        None,
        Vec::new(),
    )
}

// ======================================================================
// General route
// ======================================================================

/// Sign-change brackets among sorted `(λ, φ(λ))` probes.
fn sign_change_brackets(probes: &mut Vec<(f64, f64)>) -> Vec<(f64, f64)> {
    probes.sort_by(|a, b| a.0.total_cmp(&b.0));
    probes
        .windows(2)
        .filter(|w| (w[0].1 > 0.0) != (w[1].1 > 0.0))
        .map(|w| (w[0].0, w[1].0))
        .collect()
}

/// Solves the doubly-constrained problem (`ξ ∈ K` scenario-wise and
/// `⟨α, 𝔼ξ⟩ ≥ β`) by dualising the mean constraint and root-finding the
/// complementarity function
///
/// ```text
/// φ(λ) = β − ⟨α, 𝔼 Proj_K[G₁⁻¹(−g_λ(T) + λα)]⟩
/// ```
///
/// over `λ ≥ 0`, each evaluation being a full pointwise solve with the
/// terminal tilt `λα`.  `φ(0) ≤ 0` short-circuits to the pointwise
/// solution (branch `PointwiseOnly`, bit-identical to
/// [`solve_p1_pointwise`]).  Otherwise a bracket is expanded by doubling
/// from the a-priori guess `(|β| + ‖α‖·‖G₁⁻¹‖·‖𝔼g₀(T)‖ + 1)/⟨α, G₁⁻¹α⟩`
/// (at most [`LAMBDA_DOUBLING_CAP`] doublings) and resolved by bisection.
/// Monotonicity of `φ` is not assumed: every observed sign change is
/// reported in [`EquilibriumSolution::phi_sign_changes`] and the smallest
/// bracket is the one resolved.
///
/// The same sufficient-condition gates as the pointwise route run once on
/// the untilted system (the tilt shifts offsets only, so the certificates
/// are `λ`-invariant); [`PicardOptions::override_certificate`] skips them.
///
/// # Errors
///
/// `InvalidArgument` when either constraint is disabled or the feasibility
/// classification is `Empty`; `KktBracketFailure` when no sign change is
/// found up to the doubling cap; `CertificateRefused` and `NoConvergence`
/// as for the pointwise route.
pub fn solve_p_general(
    coeffs: &GameCoefficients,
    spec: &ConstraintSpec,
    grid: &TimeGrid,
    ensemble: &ScenarioEnsemble,
    options: &PicardOptions,
) -> Result<EquilibriumSolution> {
    coeffs.validate()?;
    spec.validate()?;
    if !spec.pointwise_enabled || !spec.affine_enabled {
        return Err(Error::invalid(
            "spec",
            "the general route requires both constraints enabled; use the \
             dedicated affine or pointwise solver otherwise",
        ));
    }
    let verdict = classify_feasibility(spec)?;
    let effectively_empty = matches!(verdict.class, FeasibilityClass::Empty)
        || (matches!(verdict.class, FeasibilityClass::DegeneratedBreadth)
            && matches!(verdict.reduces_to, Some(FeasibilityClass::Empty)));
    if effectively_empty {
        return Err(Error::invalid(
            "spec",
            format!(
                "no admissible terminal control: the constraint set classifies as {:?}",
                verdict.class
            ),
        ));
    }
    let n = coeffs.n;
    let g1_inv = g1_inverse(&coeffs.g1)?;
    let denom = spec.alpha.dot(&(&g1_inv * &spec.alpha));
    if !(denom > 0.0) {
        return Err(Error::invalid(
            "spec",
            "⟨α, G₁⁻¹α⟩ must be positive for the multiplier normalisation",
        ));
    }

    let solve_at = |lambda: f64| -> Result<(f64, BfsdeSolution)> {
        let tilt_vec;
        let tilt = if lambda == 0.0 {
            None
        } else {
            tilt_vec = lambda * &spec.alpha;
            Some(&tilt_vec)
        };
        let system = leader_fixed_point_system(coeffs, &spec.k, tilt, grid)?;
        let sol = picard_solve(
            &system,
            grid,
            ensemble,
            options.rho,
            options.tol,
            options.max_iter,
            options.regression_degree,
        )?;
        let terminal_mean = sol.x.mean_at(grid.len() - 1);
        let exi = DVector::from_fn(n, |i, _| terminal_mean[i]);
        Ok((spec.beta - spec.alpha.dot(&exi), sol))
    };

    // Gates once on the untilted system; the tilt leaves every Lipschitz
    // constant (and hence both certificates) unchanged.
    if !options.override_certificate {
        let base_system = leader_fixed_point_system(coeffs, &spec.k, None, grid)?;
        certificate_gate(coeffs, &base_system, grid)?;
    }

    let mut probes: Vec<(f64, f64)> = Vec::new();
    let (phi0, sol0) = solve_at(0.0)?;
    probes.push((0.0, phi0));
    if phi0 <= PHI_ROOT_TOL {
        let diagnostics = KktBranchDiagnostics {
            zero_branch: ZeroBranchReport {
                solved: true,
                primal_margin: phi0,
            },
            positive_branch: PositiveBranchReport {
                solved: false,
                lambda: f64::NAN,
                dual_margin: f64::NEG_INFINITY,
            },
            chosen: Some(Branch::PointwiseOnly),
        };
        return assemble_stochastic_solution(
            coeffs,
            spec,
            grid,
            ensemble,
            sol0,
            0.0,
            Branch::PointwiseOnly,
            Some(diagnostics),
            Vec::new(),
        );
    }

    // Bracket expansion from the a-priori multiplier bound.
    let g0_terminal_mean = sol0.y.mean_at(grid.len() - 1);
    let g0_norm = DVector::from_fn(n, |i, _| g0_terminal_mean[i]).norm();
    let guess =
        (spec.beta.abs() + spec.alpha.norm() * spectral_norm(&g1_inv) * g0_norm + 1.0) / denom;
    let mut lo = 0.0;
    let mut hi = guess;
    let mut bracketed = None;
    for _ in 0..=LAMBDA_DOUBLING_CAP {
        let (phi_hi, sol_hi) = solve_at(hi)?;
        probes.push((hi, phi_hi));
        if phi_hi <= 0.0 {
            bracketed = Some((phi_hi, sol_hi));
            break;
        }
        lo = hi;
        hi *= 2.0;
    }
    let Some((mut phi_best, mut sol_best)) = bracketed else {
        return Err(Error::KktBracketFailure { lambda_max: lo });
    };
    let mut lambda_best = hi;

    // Bisection on [lo, hi] with the invariant φ(lo) > 0 ≥ φ(hi); the
    // returned iterate always sits on the feasible (φ ≤ 0) side.
    for _ in 0..BISECTION_MAX_ITER {
        if -phi_best <= PHI_ROOT_TOL || (hi - lo) <= LAMBDA_WIDTH_TOL * (1.0 + hi) {
            break;
        }
        let mid = 0.5 * (lo + hi);
        let (phi_mid, sol_mid) = solve_at(mid)?;
        probes.push((mid, phi_mid));
        if phi_mid <= 0.0 {
            hi = mid;
            lambda_best = mid;
            phi_best = phi_mid;
            sol_best = sol_mid;
        } else {
            lo = mid;
        }
    }

    let phi_sign_changes = sign_change_brackets(&mut probes);
    let diagnostics = KktBranchDiagnostics {
        zero_branch: ZeroBranchReport {
            solved: true,
            primal_margin: phi0,
        },
        positive_branch: PositiveBranchReport {
            solved: true,
            lambda: lambda_best,
            dual_margin: lambda_best,
        },
        chosen: Some(Branch::General),
    };
    assemble_stochastic_solution(
        coeffs,
        spec,
        grid,
        ensemble,
        sol_best,
        lambda_best,
        Branch::General,
        Some(diagnostics),
        phi_sign_changes,
    )
}

// ======================================================================
// KKT verification
// ======================================================================

/// Re-checks the KKT conditions on a reported solution without re-solving:
/// primal feasibility of the mean constraint, dual sign, complementary
/// slackness, and a saddle probe in the multiplier direction
/// (`L(λ') − L(λ) = (λ' − λ)·(β − ⟨α, 𝔼ξ̄⟩)` for `λ' ∈ {0, λ/2, 2λ}`).
///
/// This is a report, not a gate: failed conditions set their flags and
/// `passed = false` rather than erroring.  A dimension mismatch between
/// `α` and the solution's terminal control yields `NaN` margins, which
/// fail every check.  `tolerance` must be positive for the flags to be
/// meaningful.
pub fn verify_kkt(
    solution: &EquilibriumSolution,
    spec: &ConstraintSpec,
    tolerance: f64,
) -> KktVerification {
    let exi = solution.xi.mean();
    let primal_margin = if spec.affine_enabled {
        if spec.alpha.len() == exi.len() {
            spec.beta - spec.alpha.dot(&exi)
        } else {
            f64::NAN
        }
    } else {
        0.0
    };
    let lambda = solution.lambda;
    let slackness = lambda * primal_margin;
    let dual_ok = lambda >= -tolerance;
    let primal_ok = primal_margin <= tolerance;
    let slackness_ok = slackness.abs() <= tolerance;
    let mut saddle_margin: f64 = 0.0;
    for probe in [0.0, 0.5 * lambda, 2.0 * lambda] {
        saddle_margin = saddle_margin.max((probe - lambda) * primal_margin);
    }
    let saddle_ok = saddle_margin <= tolerance;
    KktVerification {
        lambda,
        primal_margin,
        slackness,
        dual_ok,
        primal_ok,
        slackness_ok,
        saddle_margin,
        saddle_ok,
        passed: dual_ok && primal_ok && slackness_ok && saddle_ok,
    }
}

// ======================================================================
// Tests
// ======================================================================

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constraints::{interval, ConvexSet};
    use crate::core::{build_grid, sample_ensemble};
    use crate::follower::{solve_blq, ScalarGame};
    use crate::oracle::{compare, oracle_leader, DiscreteGame};
    use nalgebra::DVector;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn unit_alpha() -> DVector<f64> {
        DVector::from_element(1, 1.0)
    }

    fn affine_spec(beta: f64) -> ConstraintSpec {
        ConstraintSpec {
            k: ConvexSet::FullSpace(1),
            alpha: unit_alpha(),
            beta,
            pointwise_enabled: false,
            affine_enabled: true,
        }
    }

    fn pointwise_spec(k: ConvexSet) -> ConstraintSpec {
        ConstraintSpec {
            k,
            alpha: DVector::zeros(1),
            beta: 0.0,
            pointwise_enabled: true,
            affine_enabled: false,
        }
    }

    fn both_spec(k: ConvexSet, beta: f64) -> ConstraintSpec {
        ConstraintSpec {
            k,
            alpha: unit_alpha(),
            beta,
            pointwise_enabled: true,
            affine_enabled: true,
        }
    }

    /// Scalar instance with no dynamics and unit weights: the equilibrium
    /// is fully computable by hand (`λ = max(β, 0)`, `ξ̄ = λ`,
    /// `J₁ = ξ̄²/2`).
    fn degenerate_game(grid: &crate::core::TimeGrid) -> GameCoefficients {
        ScalarGame::default().coefficients(grid)
    }

    /// Weakly coupled, strictly dissipative scalar instance on which both
    /// sufficient certificates pass.
    fn certified_game(grid: &crate::core::TimeGrid) -> GameCoefficients {
        ScalarGame {
            a: 0.5,
            b1: 0.3,
            b2: 0.3,
            q1: 0.05,
            q2: 0.05,
            h1: 0.1,
            h2: 0.1,
            g1: 2.0,
            ..ScalarGame::default()
        }
        .coefficients(grid)
    }

    // ==================================================================
    // Affine route
    // ==================================================================

    #[test]
    fn degenerate_affine_instance_recovers_unit_multiplier() {
        let grid = build_grid(1.0, 64).unwrap();
        let coeffs = degenerate_game(&grid);
        let sol = solve_p2_affine(&coeffs, &affine_spec(1.0), &grid).unwrap();

        assert!(
            (sol.lambda - 1.0).abs() <= 1e-10,
            "multiplier should be the constraint level: λ = {}",
            sol.lambda
        );
        assert_eq!(sol.branch, Branch::Positive);
        let xi = sol.xi.mean();
        assert!((xi[0] - 1.0).abs() <= 1e-10, "ξ̄ = {}", xi[0]);
        for k in 0..grid.len() {
            assert!(
                (sol.xbar.at(0, k)[0] - 1.0).abs() <= 1e-9,
                "state should sit at the constraint level: X̄({k}) = {}",
                sol.xbar.at(0, k)[0]
            );
        }
        assert!(sol.g.sup_norm() <= 1e-12, "g should vanish");
        assert!(sol.u1.sup_norm() <= 1e-12 && sol.u2.sup_norm() <= 1e-12);
        assert!((sol.j1 - 0.5).abs() <= 1e-12, "J₁ = {}", sol.j1);
        assert!(sol.j2.abs() <= 1e-12, "J₂ = {}", sol.j2);
        assert!(sol.kkt_report.slackness.abs() <= 1e-10);
        assert!(sol.kkt_report.primal_margin.abs() <= 1e-10);
        assert!(sol.kkt_report.dual_ok);

        let diag = sol.branch_diagnostics.expect("affine route reports branches");
        assert!(diag.zero_branch.solved);
        assert!(
            diag.zero_branch.primal_margin > KKT_PRIMAL_TOL,
            "zero branch must be invalid at β = 1"
        );
        assert!(diag.positive_branch.solved);
        assert_eq!(diag.chosen, Some(Branch::Positive));
    }

    #[test]
    fn negative_level_selects_zero_branch() {
        let grid = build_grid(1.0, 48).unwrap();
        let coeffs = degenerate_game(&grid);
        let sol = solve_p2_affine(&coeffs, &affine_spec(-1.0), &grid).unwrap();

        assert_eq!(sol.branch, Branch::Zero);
        assert_eq!(sol.lambda, 0.0);
        assert!(sol.xbar.sup_norm() <= 1e-14 && sol.u1.sup_norm() <= 1e-14);
        assert!(sol.j1.abs() <= 1e-14 && sol.j2.abs() <= 1e-14);
        assert!((sol.kkt_report.primal_margin + 1.0).abs() <= 1e-12);
        assert_eq!(sol.kkt_report.slackness, 0.0);

        let diag = sol.branch_diagnostics.unwrap();
        assert!(diag.positive_branch.solved);
        assert!(
            (diag.positive_branch.lambda + 1.0).abs() <= 1e-10,
            "binding branch multiplier should report λ = −1, got {}",
            diag.positive_branch.lambda
        );
        assert_eq!(diag.chosen, Some(Branch::Zero));
    }

    #[test]
    fn multiplier_sweep_matches_positive_part() {
        let grid = build_grid(1.0, 32).unwrap();
        let coeffs = degenerate_game(&grid);
        for beta in [-1.5, -0.4, 0.0, 0.7, 2.3] {
            let sol = solve_p2_affine(&coeffs, &affine_spec(beta), &grid).unwrap();
            let expected = beta.max(0.0);
            assert!(
                (sol.lambda - expected).abs() <= 1e-9,
                "λ(β = {beta}) = {}, expected {expected}",
                sol.lambda
            );
            let expected_branch = if beta <= 0.0 {
                Branch::Zero
            } else {
                Branch::Positive
            };
            assert_eq!(sol.branch, expected_branch, "branch at β = {beta}");
            assert!(
                sol.kkt_report.slackness.abs() <= 1e-8,
                "slackness at β = {beta}: {}",
                sol.kkt_report.slackness
            );
        }
    }

    #[test]
    fn affine_solver_rejects_mismatched_spec() {
        let grid = build_grid(1.0, 16).unwrap();
        let coeffs = degenerate_game(&grid);

        let mut with_pointwise = affine_spec(1.0);
        with_pointwise.pointwise_enabled = true;
        assert!(matches!(
            solve_p2_affine(&coeffs, &with_pointwise, &grid),
            Err(Error::InvalidArgument { .. })
        ));

        let mut without_affine = affine_spec(1.0);
        without_affine.affine_enabled = false;
        assert!(matches!(
            solve_p2_affine(&coeffs, &without_affine, &grid),
            Err(Error::InvalidArgument { .. })
        ));
    }

    #[test]
    fn coupled_affine_instance_passes_kkt() {
        // Full coupling including diffusion feedback: the route computes
        // exact means, so the KKT identities must hold tightly.
        let grid = build_grid(1.0, 96).unwrap();
        let coeffs = ScalarGame {
            a: 0.4,
            b1: 0.3,
            b2: 0.25,
            c: 0.2,
            q1: 0.05,
            q2: 0.04,
            s1: 0.03,
            s2: 0.06,
            h1: 0.1,
            h2: 0.08,
            g1: 1.5,
            ..ScalarGame::default()
        }
        .coefficients(&grid);
        let spec = affine_spec(0.8);
        let sol = solve_p2_affine(&coeffs, &spec, &grid).unwrap();

        assert_eq!(sol.branch, Branch::Positive);
        assert!(sol.lambda > 0.0, "binding multiplier expected, λ = {}", sol.lambda);
        assert!(
            sol.kkt_report.primal_margin.abs() <= 1e-9,
            "binding constraint should be tight: margin = {}",
            sol.kkt_report.primal_margin
        );
        assert!(sol.kkt_report.slackness.abs() <= 1e-8);
        let verification = verify_kkt(&sol, &spec, 1e-6);
        assert!(verification.passed, "{verification:?}");

        // The terminal node of the state is pinned to the stationarity
        // value G₁⁻¹(−g(T) + λα).
        let xi = sol.xi.mean();
        let last = grid.len() - 1;
        assert!((sol.xbar.at(0, last)[0] - xi[0]).abs() <= 1e-14);
        // Nontrivial diffusion feedback must produce nonzero mean
        // integrands (the C-coupling is exactly what they carry).
        assert!(sol.zbar.sup_norm() > 1e-6, "𝔼Z̄ should be nonzero when C ≠ 0");
    }

    #[test]
    fn coupled_affine_matches_discrete_oracle() {
        // Diffusion-free coupled instance: the continuous route and the
        // discrete KKT oracle discretise the same problem, so costs,
        // terminal control, and multiplier agree up to O(Δt).
        let grid = build_grid(1.0, 128).unwrap();
        let coeffs = ScalarGame {
            a: 0.4,
            b1: 0.3,
            b2: 0.25,
            q1: 0.05,
            q2: 0.04,
            s2: 0.5,
            h1: 0.1,
            h2: 0.08,
            g1: 1.5,
            ..ScalarGame::default()
        }
        .coefficients(&grid);
        let spec = affine_spec(0.8);
        let sol = solve_p2_affine(&coeffs, &spec, &grid).unwrap();

        let dg = DiscreteGame::new(
            coeffs.clone(),
            ConvexSet::FullSpace(1),
            Some((unit_alpha(), 0.8)),
        )
        .unwrap();
        let oracle = oracle_leader(&dg).unwrap();
        let report = compare(&sol, &oracle, 5e-3).unwrap();
        assert!(
            report.within,
            "oracle disagreement beyond the discretisation budget: {report:?}"
        );

        // The follower's own best response to (ξ̄, ū₁) must reproduce the
        // anticipated response embedded in the equilibrium.
        let ensemble = ScenarioEnsemble::degenerate(&grid, 1);
        let response = solve_blq(&coeffs, &sol.xi, &sol.u1, &grid, &ensemble).unwrap();
        let mut sup = 0.0f64;
        for k in 0..grid.len() {
            sup = sup.max((response.u2.at(0, k) - sol.u2.at(0, k)).norm());
        }
        assert!(
            sup <= 1e-2,
            "anticipated and actual follower responses diverge: sup gap {sup}"
        );
    }

    // ==================================================================
    // Pointwise route
    // ==================================================================

    #[test]
    fn pointwise_homogeneous_zero_fixed_point() {
        // With 0 ∈ K and no offsets anywhere, the zero solution is the
        // fixed point and the iteration certifies it in one sweep.
        let grid = build_grid(1.0, 32).unwrap();
        let coeffs = certified_game(&grid);
        let ensemble = sample_ensemble(&grid, 16, 42, false).unwrap();
        let options = PicardOptions::default();

        let orthant = pointwise_spec(ConvexSet::NonnegativeOrthant(1));
        let sol = solve_p1_pointwise(&coeffs, &orthant, &grid, &ensemble, &options).unwrap();
        assert_eq!(sol.branch, Branch::PointwiseOnly);
        assert_eq!(sol.lambda, 0.0);
        assert!(sol.xbar.sup_norm() == 0.0 && sol.u1.sup_norm() == 0.0);
        assert!(sol.j1 == 0.0 && sol.j2 == 0.0);
        let trace = sol.picard_trace.as_ref().unwrap();
        assert!(trace.converged);
        assert_eq!(
            trace.iterations, 1,
            "zero fixed point should be certified in one sweep, took {}",
            trace.iterations
        );

        // The unconstrained (full-space) solve reaches the same point.
        let full = pointwise_spec(ConvexSet::FullSpace(1));
        let unconstrained =
            solve_p1_pointwise(&coeffs, &full, &grid, &ensemble, &options).unwrap();
        assert!(unconstrained.xbar.sup_norm() == 0.0);
        assert!(matches!(sol.xi, TerminalControl::Sampled { .. }));
        assert!(sol.xi.mean().norm() == 0.0);
    }

    #[test]
    fn certificate_gate_refuses_then_override_proceeds() {
        // Zero dissipation with nonzero coupling: the discounting
        // certificate has an empty feasible discount interval, so the gate
        // must refuse — yet the horizon is short enough for Picard to
        // converge once overridden, and 0 ∉ K forces a nonzero solution.
        let grid = build_grid(1.0, 32).unwrap();
        let coeffs = ScalarGame {
            b1: 1.0,
            q1: 0.3,
            ..ScalarGame::default()
        }
        .coefficients(&grid);
        let spec = pointwise_spec(interval(1.0, 2.0));
        let ensemble = ScenarioEnsemble::degenerate(&grid, 1);

        let refused = solve_p1_pointwise(&coeffs, &spec, &grid, &ensemble, &PicardOptions::default());
        match refused {
            Err(Error::CertificateRefused { context }) => {
                assert!(
                    context.contains("override_certificate"),
                    "refusal should point at the override flag: {context}"
                );
            }
            other => panic!("expected CertificateRefused, got {other:?}"),
        }

        let options = PicardOptions {
            override_certificate: true,
            ..PicardOptions::default()
        };
        let sol = solve_p1_pointwise(&coeffs, &spec, &grid, &ensemble, &options).unwrap();
        let xi = sol.xi.mean();
        assert!(
            (xi[0] - 1.0).abs() <= 1e-9,
            "free optimum is negative, so the clamp must activate the lower bound: ξ̄ = {}",
            xi[0]
        );
        assert!(
            sol.u1.sup_norm() > 1e-2,
            "running control should be nontrivial, sup|u₁| = {}",
            sol.u1.sup_norm()
        );
        assert!(sol.picard_trace.as_ref().unwrap().converged);
    }

    #[test]
    fn pointwise_clamp_matches_box_oracle() {
        // Certificate-passing instance whose free terminal optimum lies
        // below the box: the projected route must land on the same active
        // bound and cost as the discrete active-set oracle.
        let grid = build_grid(1.0, 32).unwrap();
        let coeffs = certified_game(&grid);
        let spec = pointwise_spec(interval(1.0, 2.0));
        let ensemble = ScenarioEnsemble::degenerate(&grid, 1);
        let sol =
            solve_p1_pointwise(&coeffs, &spec, &grid, &ensemble, &PicardOptions::default())
                .unwrap();

        let xi = sol.xi.mean();
        assert!(
            (xi[0] - 1.0).abs() <= 1e-6,
            "lower bound should be active: ξ̄ = {}",
            xi[0]
        );

        let dg = DiscreteGame::new(coeffs.clone(), interval(1.0, 2.0), None).unwrap();
        let oracle = oracle_leader(&dg).unwrap();
        let report = compare(&sol, &oracle, 5e-3).unwrap();
        assert!(
            report.within,
            "pointwise route disagrees with the box oracle: {report:?}"
        );
        assert!(
            report.j1_gap <= 1e-3,
            "leader cost should match the oracle to 1e-3 at this grid: {}",
            report.j1_gap
        );

        // Control identities: the reported controls are exactly the
        // costate images under the control kernels.
        let ops1 = kernel_ops(&coeffs.r11, &coeffs.b1).unwrap();
        let ops2 = kernel_ops(&coeffs.r22, &coeffs.b2).unwrap();
        let mut worst = 0.0f64;
        for k in 0..grid.len() {
            let u1 = &ops1[k] * sol.g.at(0, k);
            let u2 = &ops2[k] * sol.ybar.at(0, k);
            worst = worst
                .max((u1 - sol.u1.at(0, k)).norm())
                .max((u2 - sol.u2.at(0, k)).norm());
        }
        assert!(worst <= 1e-10, "control identity residual {worst}");
    }

    // ==================================================================
    // General route
    // ==================================================================

    #[test]
    fn general_box_instance_recovers_unit_multiplier() {
        // K = [0, 2] with mean level β = 1 on the degenerate instance:
        // ξ̄(λ) = clamp(λ, 0, 2), so φ(λ) = 1 − λ has its root at λ = 1.
        let grid = build_grid(1.0, 32).unwrap();
        let coeffs = degenerate_game(&grid);
        let spec = both_spec(interval(0.0, 2.0), 1.0);
        let ensemble = ScenarioEnsemble::degenerate(&grid, 1);
        let sol =
            solve_p_general(&coeffs, &spec, &grid, &ensemble, &PicardOptions::default())
                .unwrap();

        assert_eq!(sol.branch, Branch::General);
        assert!((sol.lambda - 1.0).abs() <= 1e-9, "λ = {}", sol.lambda);
        let xi = sol.xi.mean();
        assert!((xi[0] - 1.0).abs() <= 1e-9, "ξ̄ = {}", xi[0]);
        assert!((sol.j1 - 0.5).abs() <= 1e-8, "J₁ = {}", sol.j1);
        assert_eq!(
            sol.phi_sign_changes.len(),
            1,
            "exactly one sign change expected: {:?}",
            sol.phi_sign_changes
        );
        let verification = verify_kkt(&sol, &spec, 1e-6);
        assert!(verification.passed, "{verification:?}");
        let diag = sol.branch_diagnostics.unwrap();
        assert_eq!(diag.chosen, Some(Branch::General));
        assert!(diag.zero_branch.primal_margin > 0.0);
    }

    #[test]
    fn general_fullspace_matches_affine_route() {
        // With K = ℝ the projection is the identity and the bisected
        // multiplier must agree with the closed-form affine route.
        let grid = build_grid(1.0, 32).unwrap();
        let coeffs = degenerate_game(&grid);
        let beta = 0.7;
        let ensemble = ScenarioEnsemble::degenerate(&grid, 1);
        let general = solve_p_general(
            &coeffs,
            &both_spec(ConvexSet::FullSpace(1), beta),
            &grid,
            &ensemble,
            &PicardOptions::default(),
        )
        .unwrap();
        let affine = solve_p2_affine(&coeffs, &affine_spec(beta), &grid).unwrap();

        assert!(
            (general.lambda - affine.lambda).abs() <= 1e-7,
            "multiplier routes disagree: {} vs {}",
            general.lambda,
            affine.lambda
        );
        let gap = (general.xi.mean() - affine.xi.mean()).norm();
        assert!(gap <= 1e-7, "terminal controls disagree by {gap}");
        assert!(
            (general.j1 - affine.j1).abs() <= 1e-8,
            "costs disagree: {} vs {}",
            general.j1,
            affine.j1
        );
        assert_eq!(general.branch, Branch::General);
    }

    #[test]
    fn general_slack_affine_reduces_to_pointwise() {
        // β = −1 is slack at the pointwise optimum, so the general route
        // returns the pointwise solution itself.
        let grid = build_grid(1.0, 32).unwrap();
        let coeffs = certified_game(&grid);
        let k = interval(0.0, 2.0);
        let ensemble = sample_ensemble(&grid, 8, 7, false).unwrap();
        let options = PicardOptions::default();
        let general =
            solve_p_general(&coeffs, &both_spec(k.clone(), -1.0), &grid, &ensemble, &options)
                .unwrap();
        let pointwise =
            solve_p1_pointwise(&coeffs, &pointwise_spec(k), &grid, &ensemble, &options).unwrap();

        assert_eq!(general.branch, Branch::PointwiseOnly);
        assert_eq!(general.lambda, 0.0);
        assert_eq!(general.j1, pointwise.j1);
        assert_eq!(general.j2, pointwise.j2);
        let mut sup = 0.0f64;
        for m in 0..ensemble.paths {
            for k in 0..grid.len() {
                sup = sup.max((general.xbar.at(m, k) - pointwise.xbar.at(m, k)).norm());
            }
        }
        assert_eq!(sup, 0.0, "identical inner solves expected");
        assert!(
            (general.kkt_report.primal_margin - (-1.0)).abs() <= 1e-9,
            "slack margin should be β = −1, got {}",
            general.kkt_report.primal_margin
        );
    }

    #[test]
    fn general_rejects_infeasible_level() {
        let grid = build_grid(1.0, 16).unwrap();
        let coeffs = degenerate_game(&grid);
        let ensemble = ScenarioEnsemble::degenerate(&grid, 1);
        let options = PicardOptions::default();

        // β above the support value of K = [0, 2]: empty feasible set.
        let infeasible = both_spec(interval(0.0, 2.0), 3.0);
        assert!(matches!(
            solve_p_general(&coeffs, &infeasible, &grid, &ensemble, &options),
            Err(Error::InvalidArgument { .. })
        ));

        // Zero breadth reducing to Empty: a point set below the level.
        let point = ConstraintSpec {
            k: ConvexSet::Point(DVector::from_element(1, 1.5)),
            alpha: unit_alpha(),
            beta: 2.0,
            pointwise_enabled: true,
            affine_enabled: true,
        };
        assert!(matches!(
            solve_p_general(&coeffs, &point, &grid, &ensemble, &options),
            Err(Error::InvalidArgument { .. })
        ));
    }

    // ==================================================================
    // Verification and optimality
    // ==================================================================

    #[test]
    fn verify_kkt_flags_corrupted_multiplier() {
        let grid = build_grid(1.0, 32).unwrap();
        let coeffs = degenerate_game(&grid);
        let spec = affine_spec(-1.0);
        let sol = solve_p2_affine(&coeffs, &spec, &grid).unwrap();

        let clean = verify_kkt(&sol, &spec, 1e-8);
        assert!(clean.passed, "{clean:?}");

        // Corrupting the multiplier on a slack constraint breaks both the
        // slackness identity and the saddle inequality.
        let mut corrupted = sol.clone();
        corrupted.lambda += 1.0;
        let report = verify_kkt(&corrupted, &spec, 1e-8);
        assert!(!report.passed);
        assert!(!report.slackness_ok, "slackness = {}", report.slackness);
        assert!(
            !report.saddle_ok && report.saddle_margin >= 1.0 - 1e-9,
            "raising λ on a slack constraint should expose Lagrangian gain: {}",
            report.saddle_margin
        );
        assert!(report.dual_ok, "the corrupted multiplier is still nonnegative");

        // A negative multiplier violates the dual sign instead.
        let mut negative = sol.clone();
        negative.lambda = -0.5;
        let report = verify_kkt(&negative, &spec, 1e-8);
        assert!(!report.passed && !report.dual_ok);
    }

    #[test]
    fn feasible_perturbations_do_not_improve_leader_cost() {
        // First-order optimality probed directly on the cost functional:
        // 100 random feasible perturbations of (ξ̄, ū₁) of size 1e-3 may
        // not beat the equilibrium cost beyond roundoff.
        let grid = build_grid(1.0, 32).unwrap();
        let coeffs = degenerate_game(&grid);
        let spec = both_spec(interval(0.0, 2.0), 1.0);
        let ensemble = ScenarioEnsemble::degenerate(&grid, 1);
        let sol =
            solve_p_general(&coeffs, &spec, &grid, &ensemble, &PicardOptions::default())
                .unwrap();

        let xi_star = sol.xi.mean();
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let eps = 1e-3;
        for trial in 0..100 {
            // Terminal direction kept feasible: ⟨α, δ⟩ ≥ 0 preserves the
            // mean constraint, and the interior point tolerates the box.
            let mut delta: f64 = rng.random_range(-1.0..1.0);
            if spec.alpha[0] * delta < 0.0 {
                delta = -delta;
            }
            let xi = TerminalControl::Deterministic(DVector::from_element(
                1,
                xi_star[0] + eps * delta,
            ));
            let mut u1 = sol.u1.clone();
            for k in 0..grid.len() {
                let bump = eps * rng.random_range(-1.0..1.0);
                let v = [sol.u1.at(0, k)[0] + bump];
                u1.set_node(0, k, &v);
            }
            let (j1, _) = evaluate_costs(&coeffs, &xi, &u1, &sol.u2, &grid, &ensemble).unwrap();
            assert!(
                j1 >= sol.j1 - 1e-8,
                "trial {trial}: perturbed cost {j1} beats equilibrium {}",
                sol.j1
            );
        }
    }
}
