//! Backward Riccati solvers for the deterministic-coefficient game.
//!
//! Four equation families are covered, all integrated backward from their
//! terminal data with classical RK4 on a uniform grid:
//!
//! * **SRE-1** — the follower's state-weighting equation.  With the
//!   martingale part dropped (deterministic coefficients) it reads
//!
//!   ```text
//!   Ṗ = −[Q₂ + PA + AᵀP − P B₂R₂₂⁻¹B₂ᵀ P − PC (P+S₂)⁻¹ CᵀP],   P(T) = M,
//!   ```
//!
//!   and is meaningful only while `P + S₂ ≻ 0`.
//!
//! * **SRE-2** — the leader's equation on the stacked `(adjoint, state)`
//!   space of dimension `2n`, with blocks `𝔸, 𝔹, ℂ, 𝔻, ℚ, ℝ` assembled from
//!   the game data and the gain kernel `𝕂 = ℝ + 𝔻ᵀP_L𝔻 ≻ 0`:
//!
//!   ```text
//!   Ṗ_L = −[𝔸ᵀP_L + P_L𝔸 + ℂᵀP_Lℂ + ℚ − Lᵀ𝕂⁻¹L],   L = 𝔹ᵀP_L + 𝔻ᵀP_Lℂ,
//!   P_L(T) = diag(0, G₁).
//!   ```
//!
//! * **the tilde decoupling equation** — decouples the `2n`-dimensional
//!   two-point boundary system of the *unconstrained* (multiplier `λ = 0`)
//!   leader optimality system via the ansatz `𝕏 = P̃𝕐̃`:
//!
//!   ```text
//!   Ṗ̃ = Â + B̂P̃ + P̃Ã + P̃B̃P̃ − (Ĉ+P̃C̃)(I+P̃C̃₁)⁻¹P̃(Ã₁+B̃₁P̃),   P̃(T) = G̃,
//!   ```
//!
//!   which for `C ≡ 0` collapses to `Ṗ̃ = Â + B̂P̃ + P̃B̂ᵀ + P̃B̃P̃` and then
//!   admits a fundamental-matrix closed form (see
//!   [`decoupling_tilde_closed_form`]).
//!
//! * **the check decoupling equation** — the `4n`-dimensional analogue for
//!   the *binding-constraint* branch (`λ > 0`), split into means and
//!   fluctuations; the equation is an **asymmetric** Riccati flow
//!
//!   ```text
//!   Ṗ̌ = P̌Ǎᵇ + P̌B̌ᵇP̌ + Ǎ₂ᵇ + B̌₂ᵇP̌ − (P̌Čᵇ+P̌Ďᵇ+Č₂ᵇ+Ď₂ᵇ)(I+P̌Č₁ᵇ)⁻¹(P̌Ǎ₁ᵇ+P̌B̌₁ᵇP̌),
//!   ```
//!
//!   paired with a linear backward equation for the offset `p̌` produced by
//!   the inhomogeneous terminal condition.
//!
//! Every solver records the structural condition it relies on nodewise
//! (`positivity_log`), reports a step-doubling integration defect
//! (`residual_sup`), and — where symmetry is an invariant of the flow —
//! re-symmetrises after each step and reports the worst drift it had to
//! remove (`symmetry_drift`).

use nalgebra::{DMatrix, DVector};

use crate::core::{
    fundamental_matrix, rk4_step, step_doubling_defect, Direction, MatrixPath, TimeGrid,
    TransitionFamily,
};
use crate::error::{Error, Result};
use crate::follower::{GameCoefficients, C_ZERO_TOL};

/// Per-step symmetrisation drift that the symmetric flows may not exceed.
pub const SYMMETRY_TOL: f64 = 1e-12;

/// Margin demanded of every structural positivity / nondegeneracy condition
/// (minimum eigenvalue of `P+S₂` and `𝕂`, `|det|` of `I+P̃C̃₁`-type gates).
pub const POSITIVITY_TOL: f64 = 1e-10;

// ======================================================================
// Solution containers
// ======================================================================

/// A solved backward Riccati equation together with its health diagnostics.
#[derive(Debug, Clone)]
pub struct RiccatiSolution {
    /// Nodewise solution path (symmetric for SRE-1 / SRE-2 / the tilde
    /// equation; genuinely asymmetric for the check equation).
    pub p: MatrixPath,
    /// Sup over grid cells of the RK4 step-doubling defect — an a-posteriori
    /// integration residual that contracts ≈16× under grid halving.
    pub residual_sup: f64,
    /// Nodewise margin of the equation's structural condition: minimum
    /// eigenvalue of `P+S₂` (SRE-1) or `𝕂` (SRE-2), `|det(I+P̃C̃₁)|` for the
    /// tilde equation, `|det(I+P̌Č₁ᵇ)|` for the check equation.
    pub positivity_log: Vec<f64>,
    /// Largest per-step asymmetry removed by re-symmetrisation; `0` for the
    /// check equation, where symmetry is not an invariant and nothing is
    /// enforced.
    pub symmetry_drift: f64,
}

/// Outcome of a convexity test read off a solved Riccati equation.
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct ConvexityCertificate {
    /// `true` iff `margin ≥ −`[`POSITIVITY_TOL`].
    pub convex: bool,
    /// Minimum eigenvalue of the certifying matrix.
    pub margin: f64,
}

/// A-priori bounds for the scalar inverse route `y = P⁻¹`.
///
/// The construction bounds the inverse by
/// `c₁ = e^{‖C²−2A‖T} + ‖B₂²R₂₂⁻¹‖ T e^{‖C²−2A‖T}` and
/// `c₂ = e^{−2‖C²−2A‖T − c₁‖Q₂‖T}`; both are stated for unit terminal data
/// `M = 1`, so for other `M` the flag below reports honestly whether the
/// computed inverse actually stayed inside `[c₂, c₁]`.
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct InverseBounds {
    /// Upper bound `c₁`.
    pub c1: f64,
    /// Lower bound `c₂`.
    pub c2: f64,
    /// Smallest computed value of `y`.
    pub y_min: f64,
    /// Largest computed value of `y`.
    pub y_max: f64,
    /// `true` iff `c₂ − tol ≤ y_min` and `y_max ≤ c₁ + tol`.
    pub bounds_hold: bool,
}

/// The check-equation pair: the asymmetric Riccati flow and its offset.
#[derive(Debug, Clone)]
pub struct CheckDecoupling {
    /// The `4n×4n` flow `P̌` with diagnostics.
    pub p: RiccatiSolution,
    /// The offset `p̌` as a `4n×1` path (backward linear equation driven by
    /// the inhomogeneous terminal data).
    pub p_small: MatrixPath,
}

// ======================================================================
// Block coefficients
// ======================================================================

/// The stacked-space blocks of SRE-2.
///
/// `𝔸, ℂ, ℚ` are `2n×2n`, the control channels `𝔹, 𝔻` are `2n×(m₁+n)`, and
/// the control weight `ℝ` is `(m₁+n)×(m₁+n)`:
///
/// ```text
/// 𝔸 = ( −Aᵀ Q₂ )   𝔹 = ( 0  0 )   ℂ = ( −Cᵀ 0 )   𝔻 = ( 0 S₂ )
///     (  K₂ A  )       ( B₁ C )       (  0  0 )       ( 0 I  )
/// ℚ = diag(0, Q₁)   ℝ = diag(R₁₁, S₁)   terminal = diag(0, G₁),
/// ```
///
/// with the control kernels `K₁ = B₁R₁₁⁻¹B₁ᵀ`, `K₂ = B₂R₂₂⁻¹B₂ᵀ`.
#[derive(Debug, Clone)]
pub struct Sre2Blocks {
    /// Drift block `𝔸`.
    pub a: MatrixPath,
    /// Control channel `𝔹`.
    pub b: MatrixPath,
    /// Diffusion block `ℂ`.
    pub c: MatrixPath,
    /// Control-to-diffusion channel `𝔻`.
    pub d: MatrixPath,
    /// State weight `ℚ`.
    pub q: MatrixPath,
    /// Control weight `ℝ`.
    pub r: MatrixPath,
    /// Terminal value `diag(0, G₁)`.
    pub terminal: DMatrix<f64>,
}

/// The `2n×2n` blocks of the unconstrained-branch decoupling equation.
///
/// With the kernels `K₁, K₂` and the constant weights `H₁, H₂`:
///
/// ```text
/// Ã  = ( Aᵀ+H₁K₁+H₂K₂  H₁K₂       )     Â = ( K₁ K₂ )     B̂ = Ãᵀ
///      ( H₂K₁           Aᵀ+H₂K₂   )         ( K₂ 0  )
/// B̃₁₁ = −Q₁+H₁A+AᵀH₁+H₁K₁H₁+H₂K₂H₁+H₁K₂H₂
/// B̃₁₂ = −Q₂+H₂A+AᵀH₂+H₁K₁H₂+H₂K₂H₂        B̃₂₂ = H₂K₁H₂     (B̃ symmetric)
/// Ã₁ = diag(Cᵀ, Cᵀ)     B̃₁ = ( CᵀH₁ CᵀH₂ )     C̃ = B̃₁ᵀ     Ĉ = Ã₁ᵀ
///                             ( CᵀH₂ 0    )
/// C̃₁ = −( S₁−H₁  S₂−H₂ )        G̃ = −( (I+G₁⁻¹H₁)⁻¹G₁⁻¹  0 )
///       ( S₂−H₂  0     )              ( 0                 0 )
/// ```
#[derive(Debug, Clone)]
pub struct TildeBlocks {
    /// `Ã` (right drift factor of the flow).
    pub a_tilde: MatrixPath,
    /// `B̃` (symmetric quadratic weight).
    pub b_tilde: MatrixPath,
    /// `C̃ = B̃₁ᵀ`.
    pub c_tilde: MatrixPath,
    /// `Ã₁ = diag(Cᵀ, Cᵀ)`.
    pub a1_tilde: MatrixPath,
    /// `B̃₁`.
    pub b1_tilde: MatrixPath,
    /// `C̃₁` (symmetric).
    pub c1_tilde: MatrixPath,
    /// `Â` (symmetric affine term).
    pub a_hat: MatrixPath,
    /// `B̂ = Ãᵀ` (left drift factor).
    pub b_hat: MatrixPath,
    /// `Ĉ = Ã₁ᵀ`.
    pub c_hat: MatrixPath,
    /// Terminal value `G̃`.
    pub g_tilde: DMatrix<f64>,
}

/// The `4n×4n` blocks of the binding-constraint decoupling equation.
///
/// The state is split into means and fluctuations,
/// `Y̌ = (E[g]; g−E[g]; E[Ȳ]; Ȳ−E[Ȳ])` and likewise `X̌` for `(X̄, h)`;
/// the plain blocks below are the coefficients of that split system and the
/// `_bar` blocks those after the change of variable `Y̌ᵇ = Y̌ − ȞX̌` (which
/// zeroes the initial condition):
///
/// ```text
/// Ǎᵇ = Ǎ+ȞǍ₂          B̌ᵇ = ǍȞ+B̌+ȞǍ₂Ȟ+ȞB̌₂     Čᵇ = ȞČ₂     Ďᵇ = ȞĎ₂
/// Ǎ₁ᵇ = Ǎ₁             B̌₁ᵇ = Ǎ₁Ȟ                Č₁ᵇ = B̌₁+Ȟ
/// Ǎ₂ᵇ = Ǎ₂             B̌₂ᵇ = Ǎ₂Ȟ+B̌₂             Č₂ᵇ = Č₂      Ď₂ᵇ = Ď₂
/// ```
///
/// so only the genuinely new barred blocks are stored.  The terminal data
/// are `P̌(T) = (I−ǦȞ)⁻¹Ǧ` and `p̌(T) = (I−ǦȞ)⁻¹f̌`.
#[derive(Debug, Clone)]
pub struct CheckBlocks {
    /// `Ǎ = diag(Aᵀ, Aᵀ, Aᵀ, Aᵀ)`.
    pub a: MatrixPath,
    /// `B̌` (pattern of `−Q₁, −Q₂`).
    pub b: MatrixPath,
    /// `Ǎ₁` (pattern of `Cᵀ`; also `Ǎ₁ᵇ`).
    pub a1: MatrixPath,
    /// `B̌₁` (pattern of `−S₁, −S₂`).
    pub b1: MatrixPath,
    /// `Ǎ₂` (pattern of `K₁, K₂`; also `Ǎ₂ᵇ`).
    pub a2: MatrixPath,
    /// `B̌₂ = diag(A, A, A, A)`.
    pub b2: MatrixPath,
    /// `Č₂` (pattern of `C`; also `Č₂ᵇ`).
    pub c2: MatrixPath,
    /// `Ď₂` (mean/fluctuation exchange pattern of `C`; also `Ď₂ᵇ`).
    pub d2: MatrixPath,
    /// `Ǎᵇ`.
    pub a_bar: MatrixPath,
    /// `B̌ᵇ`.
    pub b_bar: MatrixPath,
    /// `Čᵇ`.
    pub c_bar: MatrixPath,
    /// `Ďᵇ`.
    pub d_bar: MatrixPath,
    /// `B̌₁ᵇ`.
    pub b1_bar: MatrixPath,
    /// `Č₁ᵇ`.
    pub c1_bar: MatrixPath,
    /// `B̌₂ᵇ`.
    pub b2_bar: MatrixPath,
    /// Initial-coupling weight `Ȟ`.
    pub h: DMatrix<f64>,
    /// Terminal-coupling weight `Ǧ`.
    pub g: DMatrix<f64>,
    /// Terminal offset `f̌` (carries the constraint level β).
    pub f: DVector<f64>,
    /// `P̌(T) = (I−ǦȞ)⁻¹Ǧ`.
    pub terminal_p: DMatrix<f64>,
    /// `p̌(T) = (I−ǦȞ)⁻¹f̌`.
    pub terminal_small: DVector<f64>,
}

/// Assembled block coefficients; each solver requires its own family.
#[derive(Debug, Clone, Default)]
pub struct BlockCoefficients {
    /// SRE-2 blocks, present after [`assemble_sre2_blocks`].
    pub sre2: Option<Sre2Blocks>,
    /// Tilde blocks, present after [`assemble_tilde_blocks`].
    pub tilde: Option<TildeBlocks>,
    /// Check blocks, present after [`assemble_check_blocks`].
    pub check: Option<CheckBlocks>,
}

// ======================================================================
// Shared helpers
// ======================================================================

/// Minimum eigenvalue of a symmetric matrix.
fn min_eig(m: &DMatrix<f64>) -> f64 {
    m.symmetric_eigenvalues()
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}

/// Smallest singular value.
fn min_singular_value(m: &DMatrix<f64>) -> f64 {
    m.clone()
        .singular_values()
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}

/// Inverse, or a NaN-filled matrix of the same shape when singular — the
/// poisoned value is caught by the integrator's finiteness check, which
/// converts it into a `NumericalBlowup` at the offending time.
fn try_inv_or_nan(m: DMatrix<f64>) -> DMatrix<f64> {
    let shape = (m.nrows(), m.ncols());
    m.try_inverse()
        .unwrap_or_else(|| DMatrix::from_element(shape.0, shape.1, f64::NAN))
}

/// Largest entrywise asymmetry `max |M − Mᵀ|`.
fn asymmetry(m: &DMatrix<f64>) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

/// Assembles a block matrix from a rectangular grid of cells.
fn compose(cells: &[Vec<DMatrix<f64>>]) -> DMatrix<f64> {
    let total_rows: usize = cells.iter().map(|row| row[0].nrows()).sum();
    let total_cols: usize = cells[0].iter().map(|cell| cell.ncols()).sum();
    let mut out = DMatrix::zeros(total_rows, total_cols);
    let mut r0 = 0;
    for row in cells {
        let height = row[0].nrows();
        let mut c0 = 0;
        for cell in row {
            assert_eq!(cell.nrows(), height, "ragged block row");
            out.view_mut((r0, c0), (cell.nrows(), cell.ncols()))
                .copy_from(cell);
            c0 += cell.ncols();
        }
        r0 += height;
    }
    out
}

/// Result of one backward integration sweep.
struct BackwardRun {
    path: MatrixPath,
    positivity_log: Vec<f64>,
    symmetry_drift: f64,
}

/// Backward RK4 sweep from `terminal` with optional per-step symmetrisation
/// and a nodewise structural-condition margin.
///
/// The condition is evaluated at the terminal node *before* any step is
/// taken, so terminal data violating it fail at exactly `t = T`.  When
/// `enforce` is set, a margin below [`POSITIVITY_TOL`] aborts with
/// `ConstraintViolation`; otherwise margins are only logged.
fn integrate_backward<R, G>(
    rhs: &R,
    terminal: DMatrix<f64>,
    grid: &TimeGrid,
    symmetrize: bool,
    margin_of: &G,
    condition: &str,
    enforce: bool,
    label: &str,
) -> Result<BackwardRun>
where
    R: Fn(f64, &DMatrix<f64>) -> DMatrix<f64>,
    G: Fn(f64, &DMatrix<f64>) -> f64,
{
    let n_steps = grid.steps;
    let mut values = vec![DMatrix::zeros(terminal.nrows(), terminal.ncols()); grid.len()];
    let mut log_rev = Vec::with_capacity(grid.len());
    let mut drift = 0.0f64;

    let check = |t: f64, v: &DMatrix<f64>, log: &mut Vec<f64>| -> Result<()> {
        let margin = margin_of(t, v);
        log.push(margin);
        if enforce && margin < POSITIVITY_TOL {
            return Err(Error::ConstraintViolation {
                time: t,
                condition: condition.to_string(),
                margin,
            });
        }
        Ok(())
    };

    values[n_steps] = terminal;
    check(grid.nodes[n_steps], &values[n_steps], &mut log_rev)?;

    for k in (0..n_steps).rev() {
        let t_from = grid.nodes[k + 1];
        let h = grid.nodes[k] - t_from;
        let mut next = rk4_step(rhs, t_from, &values[k + 1], h);
        if !next.iter().all(|x| x.is_finite()) {
            return Err(Error::NumericalBlowup {
                time: grid.nodes[k],
                context: format!("{label}: non-finite value during the backward sweep"),
            });
        }
        if symmetrize {
            drift = drift.max(asymmetry(&next));
            next = (&next + next.transpose()) * 0.5;
        }
        check(grid.nodes[k], &next, &mut log_rev)?;
        values[k] = next;
    }

    log_rev.reverse();
    Ok(BackwardRun {
        path: MatrixPath {
            grid: grid.clone(),
            values,
        },
        positivity_log: log_rev,
        symmetry_drift: drift,
    })
}

// ======================================================================
// SRE-1
// ======================================================================

/// Solves the follower's Riccati equation backward from `P(T) = M`.
///
/// The flow preserves symmetry; each step is re-symmetrised and the removed
/// drift reported.  The structural condition `P + S₂ ≻ 0` is enforced
/// nodewise (minimum eigenvalue at least [`POSITIVITY_TOL`]), starting with
/// the terminal data themselves.
///
/// # Errors
///
/// `InvalidArgument` for inconsistent data or an asymmetric `M`;
/// `ConstraintViolation` with the first failing time when `P + S₂ ≻ 0`
/// breaks; `NumericalBlowup` if the sweep leaves the representable range.
pub fn solve_sre1(
    coeffs: &GameCoefficients,
    m: &DMatrix<f64>,
    grid: &TimeGrid,
) -> Result<RiccatiSolution> {
    coeffs.validate()?;
    let n = coeffs.n;
    if m.nrows() != n || m.ncols() != n {
        return Err(Error::DimensionMismatch {
            context: format!("terminal M must be {n}×{n}, got {}×{}", m.nrows(), m.ncols()),
        });
    }
    if asymmetry(m) > SYMMETRY_TOL {
        return Err(Error::invalid(
            "M",
            format!("must be symmetric, drifts by {:.3e}", asymmetry(m)),
        ));
    }
    let k2 = coeffs.follower_kernel_path()?;
    let (a, c, q2, s2) = (&coeffs.a, &coeffs.c, &coeffs.q2, &coeffs.s2);

    let rhs = move |t: f64, p: &DMatrix<f64>| -> DMatrix<f64> {
        let at = a.interp(t);
        let ct = c.interp(t);
        let inv = try_inv_or_nan(p + s2.interp(t));
        let pc = p * &ct;
        -(q2.interp(t) + p * &at + at.transpose() * p - p * k2.interp(t) * p
            - &pc * inv * pc.transpose())
    };
    let margin = |t: f64, p: &DMatrix<f64>| min_eig(&(p + s2.interp(t)));

    let run = integrate_backward(
        &rhs,
        m.clone(),
        grid,
        true,
        &margin,
        "P + S₂ ≻ 0",
        true,
        "SRE-1",
    )?;
    let residual_sup = step_doubling_defect(&rhs, &run.path, Direction::Backward);
    Ok(RiccatiSolution {
        p: run.path,
        residual_sup,
        positivity_log: run.positivity_log,
        symmetry_drift: run.symmetry_drift,
    })
}

/// Scalar route via the inverse `y = P⁻¹` (dimension 1 only, `M > 0`).
///
/// Solves `ẏ = −[B₂²R₂₂⁻¹ + (C²−2A)y − Q₂y²]` backward from `y(T) = M⁻¹`
/// and returns `P = 1/y` together with the a-priori bounds `c₂ ≤ y ≤ c₁`
/// of the construction (stated for `M = 1`; see [`InverseBounds`]).
///
/// # Errors
///
/// `InvalidArgument` unless `n = m₁ = m₂ = 1`, `M > 0`, `Q₂ ≥ 0` and
/// `S₂ ≥ 0` nodewise; `NumericalBlowup` if `y` touches zero.
pub fn scalar_sre1_via_inverse(
    coeffs: &GameCoefficients,
    m: f64,
    grid: &TimeGrid,
) -> Result<(RiccatiSolution, InverseBounds)> {
    coeffs.validate()?;
    if coeffs.n != 1 || coeffs.m1 != 1 || coeffs.m2 != 1 {
        return Err(Error::invalid(
            "coeffs",
            format!(
                "inverse route is scalar-only, got n={}, m1={}, m2={}",
                coeffs.n, coeffs.m1, coeffs.m2
            ),
        ));
    }
    if !(m > 0.0) {
        return Err(Error::invalid(
            "M",
            format!("inverse route needs M > 0, got {m}"),
        ));
    }
    for (name, path, min_ok) in [("Q2", &coeffs.q2, 0.0), ("S2", &coeffs.s2, 0.0)] {
        if let Some(k) = path.values.iter().position(|v| v[(0, 0)] < min_ok) {
            return Err(Error::invalid(
                name,
                format!(
                    "inverse route needs {name} ≥ 0, violated at node {k} (value {})",
                    path.values[k][(0, 0)]
                ),
            ));
        }
    }

    let scalar_at = |p: &MatrixPath, t: f64| p.interp(t)[(0, 0)];
    let (a, b2, c, q2, r22) = (&coeffs.a, &coeffs.b2, &coeffs.c, &coeffs.q2, &coeffs.r22);
    let rhs = move |t: f64, y: &DMatrix<f64>| -> DMatrix<f64> {
        let yv = y[(0, 0)];
        let b2t = scalar_at(b2, t);
        let drive = b2t * b2t / scalar_at(r22, t);
        let lin = scalar_at(c, t).powi(2) - 2.0 * scalar_at(a, t);
        let quad = scalar_at(q2, t);
        DMatrix::from_element(1, 1, -(drive + lin * yv - quad * yv * yv))
    };
    // The inverse stays meaningful only while y > 0; log y itself.
    let margin = |_t: f64, y: &DMatrix<f64>| y[(0, 0)];
    let run = integrate_backward(
        &rhs,
        DMatrix::from_element(1, 1, 1.0 / m),
        grid,
        false,
        &margin,
        "y = P⁻¹ > 0",
        false,
        "SRE-1 inverse route",
    )?;

    let (mut y_min, mut y_max) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in &run.path.values {
        let yv = v[(0, 0)];
        if !(yv > 0.0) || !yv.is_finite() {
            return Err(Error::NumericalBlowup {
                time: run.path.grid.nodes[run
                    .path
                    .values
                    .iter()
                    .position(|w| w[(0, 0)] == yv)
                    .unwrap_or(0)],
                context: format!("inverse route: y left (0, ∞) with value {yv}"),
            });
        }
        y_min = y_min.min(yv);
        y_max = y_max.max(yv);
    }

    // A-priori bounds of the construction (unit terminal data).
    let sup_abs = |p: &MatrixPath, f: &dyn Fn(f64) -> f64| -> f64 {
        p.values
            .iter()
            .map(|v| f(v[(0, 0)]).abs())
            .fold(0.0, f64::max)
    };
    let horizon = grid.horizon;
    let lin_sup = (0..=grid.steps)
        .map(|k| {
            let t = grid.nodes[k];
            (scalar_at(c, t).powi(2) - 2.0 * scalar_at(a, t)).abs()
        })
        .fold(0.0, f64::max);
    let drive_sup = (0..=grid.steps)
        .map(|k| {
            let t = grid.nodes[k];
            (scalar_at(b2, t).powi(2) / scalar_at(r22, t)).abs()
        })
        .fold(0.0, f64::max);
    let q_sup = sup_abs(q2, &|x| x);
    let c1 = (lin_sup * horizon).exp() + drive_sup * horizon * (lin_sup * horizon).exp();
    let c2 = (-2.0 * lin_sup * horizon - c1 * q_sup * horizon).exp();
    let bound_tol = 1e-9;
    let bounds = InverseBounds {
        c1,
        c2,
        y_min,
        y_max,
        bounds_hold: c2 - bound_tol <= y_min && y_max <= c1 + bound_tol,
    };

    // Invert nodewise and report the defect of the direct SRE-1 flow on the
    // inverted path, so the residual measures the same equation as solve_sre1.
    let p_path = MatrixPath {
        grid: run.path.grid.clone(),
        values: run
            .path
            .values
            .iter()
            .map(|v| DMatrix::from_element(1, 1, 1.0 / v[(0, 0)]))
            .collect(),
    };
    let k2 = coeffs.follower_kernel_path()?;
    let s2 = &coeffs.s2;
    let sre1_rhs = move |t: f64, p: &DMatrix<f64>| -> DMatrix<f64> {
        let at = a.interp(t);
        let ct = c.interp(t);
        let inv = try_inv_or_nan(p + s2.interp(t));
        let pc = p * &ct;
        -(q2.interp(t) + p * &at + at.transpose() * p - p * k2.interp(t) * p
            - &pc * inv * pc.transpose())
    };
    let residual_sup = step_doubling_defect(&sre1_rhs, &p_path, Direction::Backward);
    let positivity_log: Vec<f64> = p_path
        .values
        .iter()
        .enumerate()
        .map(|(k, v)| min_eig(&(v + s2.interp(grid.nodes[k]))))
        .collect();

    Ok((
        RiccatiSolution {
            p: p_path,
            residual_sup,
            positivity_log,
            symmetry_drift: 0.0,
        },
        bounds,
    ))
}

// ======================================================================
// SRE-2
// ======================================================================

/// Resamples a path onto another grid by linear interpolation.
fn resample(path: &MatrixPath, grid: &TimeGrid) -> MatrixPath {
    MatrixPath::from_fn(grid, |t| path.interp(t))
}

/// Assembles the stacked-space blocks of SRE-2 on `grid`.
///
/// # Errors
///
/// Any validation error of `coeffs`; singular `R₁₁`/`R₂₂` nodes.
pub fn assemble_sre2_blocks(
    coeffs: &GameCoefficients,
    grid: &TimeGrid,
) -> Result<BlockCoefficients> {
    coeffs.validate()?;
    let (n, m1) = (coeffs.n, coeffs.m1);
    let k2 = resample(&coeffs.follower_kernel_path()?, grid);
    let a = resample(&coeffs.a, grid);
    let b1 = resample(&coeffs.b1, grid);
    let c = resample(&coeffs.c, grid);
    let q1 = resample(&coeffs.q1, grid);
    let q2 = resample(&coeffs.q2, grid);
    let s1 = resample(&coeffs.s1, grid);
    let s2 = resample(&coeffs.s2, grid);
    let r11 = resample(&coeffs.r11, grid);

    let zn = DMatrix::zeros(n, n);
    let znm = DMatrix::zeros(n, m1);
    let id = DMatrix::identity(n, n);
    let nodewise = |f: &dyn Fn(usize) -> DMatrix<f64>| -> MatrixPath {
        MatrixPath {
            grid: grid.clone(),
            values: (0..grid.len()).map(f).collect(),
        }
    };

    let blocks = Sre2Blocks {
        a: nodewise(&|k| {
            compose(&[
                vec![-a.at(k).transpose(), q2.at(k).clone()],
                vec![k2.at(k).clone(), a.at(k).clone()],
            ])
        }),
        b: nodewise(&|k| {
            compose(&[
                vec![znm.clone(), zn.clone()],
                vec![b1.at(k).clone(), c.at(k).clone()],
            ])
        }),
        c: nodewise(&|k| {
            compose(&[
                vec![-c.at(k).transpose(), zn.clone()],
                vec![zn.clone(), zn.clone()],
            ])
        }),
        d: nodewise(&|k| {
            compose(&[
                vec![znm.clone(), s2.at(k).clone()],
                vec![znm.clone(), id.clone()],
            ])
        }),
        q: nodewise(&|k| {
            compose(&[
                vec![zn.clone(), zn.clone()],
                vec![zn.clone(), q1.at(k).clone()],
            ])
        }),
        r: nodewise(&|k| {
            compose(&[
                vec![r11.at(k).clone(), DMatrix::zeros(m1, n)],
                vec![DMatrix::zeros(n, m1), s1.at(k).clone()],
            ])
        }),
        terminal: compose(&[
            vec![zn.clone(), zn.clone()],
            vec![zn.clone(), coeffs.g1.clone()],
        ]),
    };
    Ok(BlockCoefficients {
        sre2: Some(blocks),
        ..BlockCoefficients::default()
    })
}

/// Solves the leader's stacked Riccati equation backward from `diag(0, G₁)`.
///
/// The gain kernel `𝕂 = ℝ + 𝔻ᵀP_L𝔻` must stay positive definite; its
/// minimum eigenvalue is logged nodewise and enforced.
///
/// # Errors
///
/// `ConstraintViolation` with the first failing time when `𝕂 ≻ 0` breaks;
/// `NumericalBlowup` on a non-finite sweep; validation errors of `coeffs`.
pub fn solve_sre2(coeffs: &GameCoefficients, grid: &TimeGrid) -> Result<RiccatiSolution> {
    let blocks = assemble_sre2_blocks(coeffs, grid)?;
    let bl = blocks.sre2.as_ref().expect("just assembled");
    let (aa, bb, cc, dd, qq, rr) = (&bl.a, &bl.b, &bl.c, &bl.d, &bl.q, &bl.r);

    let rhs = move |t: f64, p: &DMatrix<f64>| -> DMatrix<f64> {
        let at = aa.interp(t);
        let bt = bb.interp(t);
        let ct = cc.interp(t);
        let dt = dd.interp(t);
        let gain = rr.interp(t) + dt.transpose() * p * &dt;
        let gain_inv = try_inv_or_nan(gain);
        let l = bt.transpose() * p + dt.transpose() * p * &ct;
        -(at.transpose() * p + p * &at + ct.transpose() * p * &ct + qq.interp(t)
            - l.transpose() * gain_inv * l)
    };
    let margin = |t: f64, p: &DMatrix<f64>| {
        let dt = dd.interp(t);
        min_eig(&(rr.interp(t) + dt.transpose() * p * dt))
    };

    let run = integrate_backward(
        &rhs,
        bl.terminal.clone(),
        grid,
        true,
        &margin,
        "𝕂 = ℝ + 𝔻ᵀP_L𝔻 ≻ 0",
        true,
        "SRE-2",
    )?;
    let residual_sup = step_doubling_defect(&rhs, &run.path, Direction::Backward);
    Ok(RiccatiSolution {
        p: run.path,
        residual_sup,
        positivity_log: run.positivity_log,
        symmetry_drift: run.symmetry_drift,
    })
}

// ======================================================================
// Convexity certificates
// ======================================================================

/// Follower convexity: minimum eigenvalue of `P(0) + H₂`.
///
/// # Errors
///
/// `DimensionMismatch` if `H₂` does not match the solved dimension.
pub fn follower_convexity_certificate(
    sre1: &RiccatiSolution,
    h2: &DMatrix<f64>,
) -> Result<ConvexityCertificate> {
    let p0 = &sre1.p.values[0];
    if h2.nrows() != p0.nrows() || h2.ncols() != p0.ncols() {
        return Err(Error::DimensionMismatch {
            context: format!(
                "H₂ must match P(0): {}×{} vs {}×{}",
                h2.nrows(),
                h2.ncols(),
                p0.nrows(),
                p0.ncols()
            ),
        });
    }
    let margin = min_eig(&(p0 + h2));
    Ok(ConvexityCertificate {
        convex: margin >= -POSITIVITY_TOL,
        margin,
    })
}

/// Leader convexity: minimum eigenvalue of `diag(0, H₁) + P_L(0)`.
///
/// # Errors
///
/// `DimensionMismatch` unless `P_L` is `2n×2n` for the `n×n` weight `H₁`.
pub fn leader_convexity_certificate(
    sre2: &RiccatiSolution,
    h1: &DMatrix<f64>,
) -> Result<ConvexityCertificate> {
    let p0 = &sre2.p.values[0];
    let n = h1.nrows();
    if h1.ncols() != n || p0.nrows() != 2 * n || p0.ncols() != 2 * n {
        return Err(Error::DimensionMismatch {
            context: format!(
                "need P_L of size 2n×2n for n×n H₁: got P_L {}×{}, H₁ {}×{}",
                p0.nrows(),
                p0.ncols(),
                h1.nrows(),
                h1.ncols()
            ),
        });
    }
    let mut embedded = DMatrix::zeros(2 * n, 2 * n);
    embedded.view_mut((n, n), (n, n)).copy_from(h1);
    let margin = min_eig(&(p0 + embedded));
    Ok(ConvexityCertificate {
        convex: margin >= -POSITIVITY_TOL,
        margin,
    })
}

// ======================================================================
// Tilde decoupling equation (unconstrained branch)
// ======================================================================

/// Determinant gate shared by the block assemblers.
fn require_nonsingular(m: &DMatrix<f64>, what: &str) -> Result<()> {
    let det = m.determinant();
    if det.abs() < 1e-12 {
        return Err(Error::invalid(
            "coeffs",
            format!("{what} is numerically singular (det {det:.3e})"),
        ));
    }
    Ok(())
}

/// Positive-definite inverse of the leader's terminal weight `G₁`.
fn g1_inverse(g1: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if g1.clone().cholesky().is_none() {
        return Err(Error::invalid(
            "G1",
            "must be positive definite for the leader constructions",
        ));
    }
    g1.clone().try_inverse().ok_or_else(|| {
        Error::invalid("G1", "positive definite but numerically non-invertible")
    })
}

/// Assembles the unconstrained-branch decoupling blocks on `grid`.
///
/// # Errors
///
/// Validation errors of `coeffs`; `InvalidArgument` if `G₁` is not positive
/// definite or `I + G₁⁻¹H₁` is singular.
pub fn assemble_tilde_blocks(
    coeffs: &GameCoefficients,
    grid: &TimeGrid,
) -> Result<BlockCoefficients> {
    coeffs.validate()?;
    let n = coeffs.n;
    let g1_inv = g1_inverse(&coeffs.g1)?;
    let gate = DMatrix::identity(n, n) + &g1_inv * &coeffs.h1;
    require_nonsingular(&gate, "I + G₁⁻¹H₁")?;
    let top_left = -(gate
        .try_inverse()
        .expect("checked nonsingular above")
        * &g1_inv);
    let zn = DMatrix::zeros(n, n);
    let g_tilde = compose(&[
        vec![top_left, zn.clone()],
        vec![zn.clone(), zn.clone()],
    ]);

    let k1 = resample(&coeffs.leader_kernel_path()?, grid);
    let k2 = resample(&coeffs.follower_kernel_path()?, grid);
    let a = resample(&coeffs.a, grid);
    let c = resample(&coeffs.c, grid);
    let q1 = resample(&coeffs.q1, grid);
    let q2 = resample(&coeffs.q2, grid);
    let s1 = resample(&coeffs.s1, grid);
    let s2 = resample(&coeffs.s2, grid);
    let (h1, h2) = (&coeffs.h1, &coeffs.h2);

    let len = grid.len();
    let mut a_tilde = Vec::with_capacity(len);
    let mut b_tilde = Vec::with_capacity(len);
    let mut c_tilde = Vec::with_capacity(len);
    let mut a1_tilde = Vec::with_capacity(len);
    let mut b1_tilde = Vec::with_capacity(len);
    let mut c1_tilde = Vec::with_capacity(len);
    let mut a_hat = Vec::with_capacity(len);
    let mut b_hat = Vec::with_capacity(len);
    let mut c_hat = Vec::with_capacity(len);

    for k in 0..len {
        let (ak, ck) = (a.at(k), c.at(k));
        let (k1k, k2k) = (k1.at(k), k2.at(k));
        let at = ak.transpose();
        let ct = ck.transpose();

        let a_t = compose(&[
            vec![&at + h1 * k1k + h2 * k2k, h1 * k2k],
            vec![h2 * k1k, &at + h2 * k2k],
        ]);
        let b11 = -q1.at(k) + h1 * ak + &at * h1 + h1 * k1k * h1 + h2 * k2k * h1 + h1 * k2k * h2;
        let b12 = -q2.at(k) + h2 * ak + &at * h2 + h1 * k1k * h2 + h2 * k2k * h2;
        let b21 = b12.transpose();
        let b22 = h2 * k1k * h2;
        let b_t = compose(&[vec![b11, b12], vec![b21, b22]]);
        let a1_t = compose(&[
            vec![ct.clone(), zn.clone()],
            vec![zn.clone(), ct.clone()],
        ]);
        let b1_t = compose(&[
            vec![&ct * h1, &ct * h2],
            vec![&ct * h2, zn.clone()],
        ]);
        let c1_t = -compose(&[
            vec![s1.at(k) - h1, s2.at(k) - h2],
            vec![s2.at(k) - h2, zn.clone()],
        ]);
        let a_h = compose(&[
            vec![k1k.clone(), k2k.clone()],
            vec![k2k.clone(), zn.clone()],
        ]);

        b_hat.push(a_t.transpose());
        c_hat.push(a1_t.transpose());
        c_tilde.push(b1_t.transpose());
        a_tilde.push(a_t);
        b_tilde.push(b_t);
        a1_tilde.push(a1_t);
        b1_tilde.push(b1_t);
        c1_tilde.push(c1_t);
        a_hat.push(a_h);
    }

    let path = |values: Vec<DMatrix<f64>>| MatrixPath {
        grid: grid.clone(),
        values,
    };
    Ok(BlockCoefficients {
        tilde: Some(TildeBlocks {
            a_tilde: path(a_tilde),
            b_tilde: path(b_tilde),
            c_tilde: path(c_tilde),
            a1_tilde: path(a1_tilde),
            b1_tilde: path(b1_tilde),
            c1_tilde: path(c1_tilde),
            a_hat: path(a_hat),
            b_hat: path(b_hat),
            c_hat: path(c_hat),
            g_tilde,
        }),
        ..BlockCoefficients::default()
    })
}

/// `true` when every diffusion-coupled tilde block vanishes (the `C ≡ 0`
/// reduction applies and the closed form exists).
fn tilde_is_diffusion_free(bl: &TildeBlocks) -> bool {
    bl.a1_tilde.max_abs().max(bl.b1_tilde.max_abs()).max(
        bl.c_tilde.max_abs().max(bl.c_hat.max_abs()),
    ) < C_ZERO_TOL
}

/// Checks the invertibility of the terminal-data denominator
/// `D(t) = Ψ₂₂(T,t) − G·Ψ₁₂(T,t)` along the whole grid.
///
/// Detection is two-fold: a near-zero smallest singular value at a node, or
/// a sign change of `det D` between consecutive nodes (a certificate that
/// the denominator crosses singularity inside the interval).
fn representation_gate(
    family: &TransitionFamily,
    g_term: &DMatrix<f64>,
    d: usize,
    label: &str,
) -> Result<()> {
    let mut prev_det: Option<f64> = None;
    for k in 0..family.to_horizon.len() {
        let psi = &family.to_horizon[k];
        let psi12 = psi.view((0, d), (d, d)).into_owned();
        let psi22 = psi.view((d, d), (d, d)).into_owned();
        let den = psi22 - g_term * psi12;
        let sv = min_singular_value(&den);
        let det = den.determinant();
        let t = family.grid.nodes[k];
        if sv < POSITIVITY_TOL {
            return Err(Error::RepresentationFailure {
                context: format!(
                    "{label}: terminal-data denominator singular at t = {t:.6} \
                     (min singular value {sv:.3e}); the decoupling representation \
                     does not exist on the whole horizon"
                ),
            });
        }
        if let Some(pd) = prev_det {
            if pd * det < 0.0 {
                return Err(Error::RepresentationFailure {
                    context: format!(
                        "{label}: det of the terminal-data denominator changes sign \
                         between t = {:.6} and t = {t:.6}; the flow escapes in \
                         finite time inside that interval",
                        family.grid.nodes[k - 1]
                    ),
                });
            }
        }
        prev_det = Some(det);
    }
    Ok(())
}

/// Shared closed-form evaluation for the diffusion-free reductions.
///
/// Both reductions linearise as `(U; V)' = Â₊(t) (U; V)` with
/// `P = V U⁻¹`; imposing the terminal data `(U(T); V(T)) = (I; G)` yields
///
/// ```text
/// P(t) = −[Ψ₂₂(T,t) − G Ψ₁₂(T,t)]⁻¹ [Ψ₂₁(T,t) − G Ψ₁₁(T,t)],
/// ```
///
/// which reproduces the terminal value exactly at `t = T`.
fn closed_form_from_linearization(
    a_lin: &MatrixPath,
    g_term: &DMatrix<f64>,
    grid: &TimeGrid,
    label: &str,
) -> Result<MatrixPath> {
    let d = g_term.nrows();
    let family = fundamental_matrix(a_lin, grid)?;
    representation_gate(&family, g_term, d, label)?;
    let mut values = Vec::with_capacity(grid.len());
    for k in 0..grid.len() {
        let psi = &family.to_horizon[k];
        let psi11 = psi.view((0, 0), (d, d)).into_owned();
        let psi12 = psi.view((0, d), (d, d)).into_owned();
        let psi21 = psi.view((d, 0), (d, d)).into_owned();
        let psi22 = psi.view((d, d), (d, d)).into_owned();
        let den = psi22 - g_term * psi12;
        let num = psi21 - g_term * psi11;
        let den_inv = den.try_inverse().ok_or_else(|| Error::RepresentationFailure {
            context: format!(
                "{label}: denominator inversion failed at t = {:.6}",
                grid.nodes[k]
            ),
        })?;
        values.push(-(den_inv * num));
    }
    Ok(MatrixPath {
        grid: grid.clone(),
        values,
    })
}

/// Fundamental-matrix closed form of the `C ≡ 0` tilde equation.
///
/// Exposed separately so tests can cross-check [`solve_decoupling_tilde`]
/// against an independent computation of the same object.
///
/// # Errors
///
/// `InvalidArgument` if the blocks are missing or carry diffusion coupling;
/// `RepresentationFailure` when the terminal-data denominator degenerates.
pub fn decoupling_tilde_closed_form(
    blocks: &BlockCoefficients,
    grid: &TimeGrid,
) -> Result<MatrixPath> {
    let bl = blocks
        .tilde
        .as_ref()
        .ok_or_else(|| Error::invalid("blocks", "tilde blocks missing"))?;
    if !tilde_is_diffusion_free(bl) {
        return Err(Error::invalid(
            "blocks",
            "closed form exists only for the diffusion-free reduction (C ≡ 0)",
        ));
    }
    let a_lin = MatrixPath::from_fn(grid, |t| {
        compose(&[
            vec![-bl.b_hat.interp(t).transpose(), -bl.b_tilde.interp(t)],
            vec![bl.a_hat.interp(t), bl.b_hat.interp(t)],
        ])
    });
    closed_form_from_linearization(&a_lin, &bl.g_tilde, grid, "tilde closed form")
}

/// Solves the unconstrained-branch decoupling equation backward from `G̃`.
///
/// On the `C ≡ 0` fast path the representation gate (existence of the
/// fundamental-matrix denominator along the whole horizon) runs *before*
/// integration and the reduced flow `Ṗ̃ = Â + B̂P̃ + P̃B̂ᵀ + P̃B̃P̃` is
/// integrated; otherwise the full flow runs with `|det(I+P̃C̃₁)|` enforced
/// nodewise.  Symmetry is an invariant of both and is enforced per step.
///
/// # Errors
///
/// `InvalidArgument` (missing blocks), `RepresentationFailure` (fast-path
/// denominator degenerates), `ConstraintViolation` (`det(I+P̃C̃₁)` gate on
/// the general path), `NumericalBlowup`.
pub fn solve_decoupling_tilde(
    blocks: &BlockCoefficients,
    grid: &TimeGrid,
) -> Result<RiccatiSolution> {
    let bl = blocks
        .tilde
        .as_ref()
        .ok_or_else(|| Error::invalid("blocks", "tilde blocks missing"))?;
    let diffusion_free = tilde_is_diffusion_free(bl);

    if diffusion_free {
        let a_lin = MatrixPath::from_fn(grid, |t| {
            compose(&[
                vec![-bl.b_hat.interp(t).transpose(), -bl.b_tilde.interp(t)],
                vec![bl.a_hat.interp(t), bl.b_hat.interp(t)],
            ])
        });
        let family = fundamental_matrix(&a_lin, grid)?;
        representation_gate(&family, &bl.g_tilde, bl.g_tilde.nrows(), "tilde equation")?;

        let rhs = move |t: f64, p: &DMatrix<f64>| -> DMatrix<f64> {
            let bh = bl.b_hat.interp(t);
            bl.a_hat.interp(t) + &bh * p + p * bh.transpose() + p * bl.b_tilde.interp(t) * p
        };
        let margin = |t: f64, p: &DMatrix<f64>| {
            (DMatrix::identity(p.nrows(), p.ncols()) + p * bl.c1_tilde.interp(t))
                .determinant()
                .abs()
        };
        let run = integrate_backward(
            &rhs,
            bl.g_tilde.clone(),
            grid,
            true,
            &margin,
            "det(I + P̃C̃₁) ≠ 0",
            false,
            "tilde equation (C ≡ 0)",
        )?;
        let residual_sup = step_doubling_defect(&rhs, &run.path, Direction::Backward);
        return Ok(RiccatiSolution {
            p: run.path,
            residual_sup,
            positivity_log: run.positivity_log,
            symmetry_drift: run.symmetry_drift,
        });
    }

    let rhs = move |t: f64, p: &DMatrix<f64>| -> DMatrix<f64> {
        let gate = DMatrix::identity(p.nrows(), p.ncols()) + p * bl.c1_tilde.interp(t);
        let gate_inv = try_inv_or_nan(gate);
        let left = bl.c_hat.interp(t) + p * bl.c_tilde.interp(t);
        let right = p * (bl.a1_tilde.interp(t) + bl.b1_tilde.interp(t) * p);
        bl.a_hat.interp(t)
            + bl.b_hat.interp(t) * p
            + p * bl.a_tilde.interp(t)
            + p * bl.b_tilde.interp(t) * p
            - left * gate_inv * right
    };
    let margin = |t: f64, p: &DMatrix<f64>| {
        (DMatrix::identity(p.nrows(), p.ncols()) + p * bl.c1_tilde.interp(t))
            .determinant()
            .abs()
    };
    let run = integrate_backward(
        &rhs,
        bl.g_tilde.clone(),
        grid,
        true,
        &margin,
        "det(I + P̃C̃₁) ≠ 0",
        true,
        "tilde equation",
    )?;
    let residual_sup = step_doubling_defect(&rhs, &run.path, Direction::Backward);
    Ok(RiccatiSolution {
        p: run.path,
        residual_sup,
        positivity_log: run.positivity_log,
        symmetry_drift: run.symmetry_drift,
    })
}

// ======================================================================
// Check decoupling equation (binding-constraint branch)
// ======================================================================

/// Assembles the binding-constraint decoupling blocks on `grid`.
///
/// `alpha`/`beta` are the affine terminal constraint data `⟨α, Eξ⟩ ≥ β`;
/// the mean/fluctuation split determines the `4n`-dimensional patterns and
/// the inhomogeneous terminal offset `f̌` carrying `β`.
///
/// # Errors
///
/// Validation errors of `coeffs`; `InvalidArgument` if `α = 0`, `G₁` is not
/// positive definite, or either existence determinant
/// (`I + G₁⁻¹H₁` and its constrained variant, hence `I − ǦȞ`) vanishes.
pub fn assemble_check_blocks(
    coeffs: &GameCoefficients,
    grid: &TimeGrid,
    alpha: &DVector<f64>,
    beta: f64,
) -> Result<BlockCoefficients> {
    coeffs.validate()?;
    let n = coeffs.n;
    if alpha.len() != n {
        return Err(Error::DimensionMismatch {
            context: format!("alpha must have length {n}, got {}", alpha.len()),
        });
    }
    if alpha.iter().all(|&x| x == 0.0) {
        return Err(Error::invalid(
            "alpha",
            "must be nonzero for the binding-constraint branch",
        ));
    }
    let g1_inv = g1_inverse(&coeffs.g1)?;
    let denom = (alpha.transpose() * &g1_inv * alpha)[(0, 0)];
    if !(denom > 0.0) {
        return Err(Error::invalid(
            "alpha",
            format!("⟨α, G₁⁻¹α⟩ must be positive, got {denom}"),
        ));
    }
    let projector = &g1_inv * alpha * alpha.transpose() * &g1_inv / denom;
    let constrained_inv = &g1_inv - &projector; // G₁⁻¹ − G₁⁻¹ααᵀG₁⁻¹/⟨α,G₁⁻¹α⟩
    let id = DMatrix::identity(n, n);
    require_nonsingular(&(&id + &g1_inv * &coeffs.h1), "I + G₁⁻¹H₁")?;
    require_nonsingular(
        &(&id + &constrained_inv * &coeffs.h1),
        "I + (G₁⁻¹ − G₁⁻¹ααᵀG₁⁻¹/⟨α,G₁⁻¹α⟩)H₁",
    )?;

    let zn = DMatrix::zeros(n, n);
    let g_check = compose(&[
        vec![-&constrained_inv, zn.clone(), zn.clone(), zn.clone()],
        vec![zn.clone(), -&g1_inv, zn.clone(), zn.clone()],
        vec![zn.clone(), zn.clone(), zn.clone(), zn.clone()],
        vec![zn.clone(), zn.clone(), zn.clone(), zn.clone()],
    ]);
    let h_check = {
        let (h1, h2) = (&coeffs.h1, &coeffs.h2);
        compose(&[
            vec![h1.clone(), zn.clone(), h2.clone(), zn.clone()],
            vec![zn.clone(), h1.clone(), zn.clone(), h2.clone()],
            vec![h2.clone(), zn.clone(), zn.clone(), zn.clone()],
            vec![zn.clone(), h2.clone(), zn.clone(), zn.clone()],
        ])
    };
    let mut f_check = DVector::zeros(4 * n);
    let f_top = &g1_inv * alpha * (beta / denom);
    f_check.rows_mut(0, n).copy_from(&f_top);

    let coupler = DMatrix::identity(4 * n, 4 * n) - &g_check * &h_check;
    require_nonsingular(&coupler, "I − ǦȞ")?;
    let coupler_inv = coupler.try_inverse().expect("checked nonsingular above");
    let terminal_p = &coupler_inv * &g_check;
    let terminal_small = &coupler_inv * &f_check;

    let k1 = resample(&coeffs.leader_kernel_path()?, grid);
    let k2 = resample(&coeffs.follower_kernel_path()?, grid);
    let a = resample(&coeffs.a, grid);
    let c = resample(&coeffs.c, grid);
    let q1 = resample(&coeffs.q1, grid);
    let q2 = resample(&coeffs.q2, grid);
    let s1 = resample(&coeffs.s1, grid);
    let s2 = resample(&coeffs.s2, grid);

    let len = grid.len();
    let mut va = Vec::with_capacity(len);
    let mut vb = Vec::with_capacity(len);
    let mut va1 = Vec::with_capacity(len);
    let mut vb1 = Vec::with_capacity(len);
    let mut va2 = Vec::with_capacity(len);
    let mut vb2 = Vec::with_capacity(len);
    let mut vc2 = Vec::with_capacity(len);
    let mut vd2 = Vec::with_capacity(len);
    let mut va_bar = Vec::with_capacity(len);
    let mut vb_bar = Vec::with_capacity(len);
    let mut vc_bar = Vec::with_capacity(len);
    let mut vd_bar = Vec::with_capacity(len);
    let mut vb1_bar = Vec::with_capacity(len);
    let mut vc1_bar = Vec::with_capacity(len);
    let mut vb2_bar = Vec::with_capacity(len);

    for k in 0..len {
        let (ak, ck) = (a.at(k), c.at(k));
        let at = ak.transpose();
        let ct = ck.transpose();
        let (q1k, q2k) = (q1.at(k), q2.at(k));
        let (s1k, s2k) = (s1.at(k), s2.at(k));
        let (k1k, k2k) = (k1.at(k), k2.at(k));

        let a_ck = compose(&[
            vec![at.clone(), zn.clone(), zn.clone(), zn.clone()],
            vec![zn.clone(), at.clone(), zn.clone(), zn.clone()],
            vec![zn.clone(), zn.clone(), at.clone(), zn.clone()],
            vec![zn.clone(), zn.clone(), zn.clone(), at.clone()],
        ]);
        let b_ck = compose(&[
            vec![-q1k, zn.clone(), -q2k, zn.clone()],
            vec![zn.clone(), -q1k, zn.clone(), -q2k],
            vec![-q2k, zn.clone(), zn.clone(), zn.clone()],
            vec![zn.clone(), -q2k, zn.clone(), zn.clone()],
        ]);
        let a1_ck = compose(&[
            vec![zn.clone(), zn.clone(), zn.clone(), zn.clone()],
            vec![ct.clone(), ct.clone(), zn.clone(), zn.clone()],
            vec![zn.clone(), zn.clone(), zn.clone(), zn.clone()],
            vec![zn.clone(), zn.clone(), ct.clone(), ct.clone()],
        ]);
        let b1_ck = compose(&[
            vec![zn.clone(), zn.clone(), zn.clone(), zn.clone()],
            vec![zn.clone(), -s1k, zn.clone(), -s2k],
            vec![zn.clone(), zn.clone(), zn.clone(), zn.clone()],
            vec![zn.clone(), -s2k, zn.clone(), zn.clone()],
        ]);
        let a2_ck = compose(&[
            vec![k1k.clone(), zn.clone(), k2k.clone(), zn.clone()],
            vec![zn.clone(), k1k.clone(), zn.clone(), k2k.clone()],
            vec![k2k.clone(), zn.clone(), zn.clone(), zn.clone()],
            vec![zn.clone(), k2k.clone(), zn.clone(), zn.clone()],
        ]);
        let b2_ck = compose(&[
            vec![ak.clone(), zn.clone(), zn.clone(), zn.clone()],
            vec![zn.clone(), ak.clone(), zn.clone(), zn.clone()],
            vec![zn.clone(), zn.clone(), ak.clone(), zn.clone()],
            vec![zn.clone(), zn.clone(), zn.clone(), ak.clone()],
        ]);
        let c2_ck = compose(&[
            vec![zn.clone(), zn.clone(), zn.clone(), zn.clone()],
            vec![zn.clone(), ck.clone(), zn.clone(), zn.clone()],
            vec![zn.clone(), zn.clone(), zn.clone(), zn.clone()],
            vec![zn.clone(), zn.clone(), zn.clone(), ck.clone()],
        ]);
        let d2_ck = compose(&[
            vec![zn.clone(), ck.clone(), zn.clone(), zn.clone()],
            vec![zn.clone(), -ck, zn.clone(), zn.clone()],
            vec![zn.clone(), zn.clone(), zn.clone(), ck.clone()],
            vec![zn.clone(), zn.clone(), zn.clone(), -ck],
        ]);

        va_bar.push(&a_ck + &h_check * &a2_ck);
        vb_bar.push(&a_ck * &h_check + &b_ck + &h_check * &a2_ck * &h_check + &h_check * &b2_ck);
        vc_bar.push(&h_check * &c2_ck);
        vd_bar.push(&h_check * &d2_ck);
        vb1_bar.push(&a1_ck * &h_check);
        vc1_bar.push(&b1_ck + &h_check);
        vb2_bar.push(&a2_ck * &h_check + &b2_ck);

        va.push(a_ck);
        vb.push(b_ck);
        va1.push(a1_ck);
        vb1.push(b1_ck);
        va2.push(a2_ck);
        vb2.push(b2_ck);
        vc2.push(c2_ck);
        vd2.push(d2_ck);
    }

    let path = |values: Vec<DMatrix<f64>>| MatrixPath {
        grid: grid.clone(),
        values,
    };
    Ok(BlockCoefficients {
        check: Some(CheckBlocks {
            a: path(va),
            b: path(vb),
            a1: path(va1),
            b1: path(vb1),
            a2: path(va2),
            b2: path(vb2),
            c2: path(vc2),
            d2: path(vd2),
            a_bar: path(va_bar),
            b_bar: path(vb_bar),
            c_bar: path(vc_bar),
            d_bar: path(vd_bar),
            b1_bar: path(vb1_bar),
            c1_bar: path(vc1_bar),
            b2_bar: path(vb2_bar),
            h: h_check,
            g: g_check,
            f: f_check,
            terminal_p,
            terminal_small,
        }),
        ..BlockCoefficients::default()
    })
}

/// `true` when all diffusion-coupled check blocks vanish (`C ≡ 0`).
fn check_is_diffusion_free(bl: &CheckBlocks) -> bool {
    bl.a1
        .max_abs()
        .max(bl.b1_bar.max_abs())
        .max(bl.c_bar.max_abs())
        .max(bl.d_bar.max_abs())
        .max(bl.c2.max_abs())
        .max(bl.d2.max_abs())
        < C_ZERO_TOL
}

/// Fundamental-matrix closed form of the `C ≡ 0` check equation.
///
/// # Errors
///
/// `InvalidArgument` if the blocks are missing or carry diffusion coupling;
/// `RepresentationFailure` on a degenerate terminal-data denominator.
pub fn decoupling_check_closed_form(
    blocks: &BlockCoefficients,
    grid: &TimeGrid,
) -> Result<MatrixPath> {
    let bl = blocks
        .check
        .as_ref()
        .ok_or_else(|| Error::invalid("blocks", "check blocks missing"))?;
    if !check_is_diffusion_free(bl) {
        return Err(Error::invalid(
            "blocks",
            "closed form exists only for the diffusion-free reduction (C ≡ 0)",
        ));
    }
    let a_lin = MatrixPath::from_fn(grid, |t| {
        compose(&[
            vec![-bl.a_bar.interp(t), -bl.b_bar.interp(t)],
            vec![bl.a2.interp(t), bl.b2_bar.interp(t)],
        ])
    });
    closed_form_from_linearization(&a_lin, &bl.terminal_p, grid, "check closed form")
}

/// Solves the binding-constraint decoupling pair `(P̌, p̌)` backward.
///
/// `P̌` follows the asymmetric Riccati flow (no symmetrisation — symmetry is
/// not an invariant here) from `P̌(T) = (I−ǦȞ)⁻¹Ǧ`; `p̌` then follows the
/// linear backward equation from `p̌(T) = (I−ǦȞ)⁻¹f̌`, reading `P̌` along
/// the already-computed path.  On the `C ≡ 0` fast path no gate inversion
/// is needed; the general path enforces `|det(I+P̌Č₁ᵇ)|` nodewise.
///
/// # Errors
///
/// `InvalidArgument` (missing blocks), `ConstraintViolation` (degenerate
/// gate on the general path), `NumericalBlowup`.
pub fn solve_decoupling_check(
    blocks: &BlockCoefficients,
    grid: &TimeGrid,
) -> Result<CheckDecoupling> {
    let bl = blocks
        .check
        .as_ref()
        .ok_or_else(|| Error::invalid("blocks", "check blocks missing"))?;
    let diffusion_free = check_is_diffusion_free(bl);

    // Left factor and gate inverse of the correction term; the right factor
    // differs between the flow and the offset equation.
    let correction = move |t: f64, p: &DMatrix<f64>| -> (DMatrix<f64>, DMatrix<f64>) {
        let gate = DMatrix::identity(p.nrows(), p.nrows()) + p * bl.c1_bar.interp(t);
        let gate_inv = try_inv_or_nan(gate);
        let left = p * bl.c_bar.interp(t) + p * bl.d_bar.interp(t) + bl.c2.interp(t)
            + bl.d2.interp(t);
        (left, gate_inv)
    };

    let rhs = move |t: f64, p: &DMatrix<f64>| -> DMatrix<f64> {
        let base = p * bl.a_bar.interp(t)
            + p * bl.b_bar.interp(t) * p
            + bl.a2.interp(t)
            + bl.b2_bar.interp(t) * p;
        if diffusion_free {
            base
        } else {
            let (left, gate_inv) = correction(t, p);
            let right = p * bl.a1.interp(t) + p * bl.b1_bar.interp(t) * p;
            base - left * gate_inv * right
        }
    };
    let margin = |t: f64, p: &DMatrix<f64>| {
        (DMatrix::identity(p.nrows(), p.nrows()) + p * bl.c1_bar.interp(t))
            .determinant()
            .abs()
    };
    let run = integrate_backward(
        &rhs,
        bl.terminal_p.clone(),
        grid,
        false,
        &margin,
        "det(I + P̌Č₁ᵇ) ≠ 0",
        !diffusion_free,
        "check equation",
    )?;
    let residual_sup = step_doubling_defect(&rhs, &run.path, Direction::Backward);
    let p_path = run.path;

    // Offset equation, linear in p̌, driven by the computed P̌ path.
    let p_for_offset = p_path.clone();
    let offset_rhs = move |t: f64, small: &DMatrix<f64>| -> DMatrix<f64> {
        let p = p_for_offset.interp(t);
        let base = &p * bl.b_bar.interp(t) * small + bl.b2_bar.interp(t) * small;
        if diffusion_free {
            base
        } else {
            let gate = DMatrix::identity(p.nrows(), p.nrows()) + &p * bl.c1_bar.interp(t);
            let gate_inv = try_inv_or_nan(gate);
            let left = &p * bl.c_bar.interp(t) + &p * bl.d_bar.interp(t) + bl.c2.interp(t)
                + bl.d2.interp(t);
            base - left * gate_inv * (&p * bl.b1_bar.interp(t) * small)
        }
    };
    let dim = bl.terminal_small.len();
    let terminal_small = DMatrix::from_column_slice(dim, 1, bl.terminal_small.as_slice());
    let offset_run = integrate_backward(
        &offset_rhs,
        terminal_small,
        grid,
        false,
        &|_, _| f64::INFINITY,
        "none",
        false,
        "check offset equation",
    )?;

    Ok(CheckDecoupling {
        p: RiccatiSolution {
            p: p_path,
            residual_sup,
            positivity_log: run.positivity_log,
            symmetry_drift: 0.0,
        },
        p_small: offset_run.path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::core::{build_grid, trapezoid};
    use crate::follower::ScalarGame;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn scalar(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    // ==================================================================
    // SRE-1
    // ==================================================================

    #[test]
    fn sre1_separable_closed_form() {
        // A=C=Q₂=0, B₂=R₂₂=S₂=M=1: Ṗ = P², P(t) = 1/(2−t), P(0) = 0.5.
        let grid = build_grid(1.0, 200).unwrap();
        let coeffs = ScalarGame {
            b2: 1.0,
            s2: 1.0,
            ..ScalarGame::default()
        }
        .coefficients(&grid);
        let sol = solve_sre1(&coeffs, &scalar(1.0), &grid).unwrap();
        assert_relative_eq!(sol.p.values[0][(0, 0)], 0.5, epsilon = 1e-8);
        assert_eq!(sol.p.values[200][(0, 0)], 1.0, "terminal stored exactly");
        for (k, &margin) in sol.positivity_log.iter().enumerate() {
            assert!(
                margin >= POSITIVITY_TOL,
                "P+S₂ margin at node {k} was {margin:e}"
            );
        }
    }

    #[test]
    fn sre1_pure_integration_is_exact() {
        // Q₂=1, everything else zero, M=0: Ṗ = −Q₂ gives P(t) = T−t.
        let grid = build_grid(1.0, 50).unwrap();
        let coeffs = ScalarGame {
            q2: 1.0,
            s2: 1.0,
            ..ScalarGame::default()
        }
        .coefficients(&grid);
        let sol = solve_sre1(&coeffs, &scalar(0.0), &grid).unwrap();
        assert_relative_eq!(sol.p.values[0][(0, 0)], 1.0, epsilon = 1e-10);
        for k in 0..=50 {
            assert_relative_eq!(
                sol.p.values[k][(0, 0)],
                 1.0 - grid.nodes[k],
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn sre1_rejects_degenerate_terminal() {
        // M=0 with S₂ ≡ 0 violates P+S₂ ≻ 0 at t = T itself.
        let grid = build_grid(1.0, 10).unwrap();
        let coeffs = ScalarGame::default().coefficients(&grid);
        let err = solve_sre1(&coeffs, &scalar(0.0), &grid).unwrap_err();
        match err {
            Error::ConstraintViolation { time, condition, .. } => {
                assert_eq!(time, 1.0, "must fail at exactly t = T");
                assert!(condition.contains("S₂"), "condition was: {condition}");
            }
            other => panic!("expected ConstraintViolation, got {other:?}"),
        }
    }

    #[test]
    fn sre1_two_dimensional_symmetry_and_positivity() {
        let grid = build_grid(1.0, 100).unwrap();
        let mut coeffs = ScalarGame::default().coefficients(&grid);
        coeffs.n = 2;
        coeffs.m2 = 1;
        let m2 = |m: DMatrix<f64>| MatrixPath::constant(&grid, m);
        coeffs.a = m2(DMatrix::from_row_slice(2, 2, &[0.1, -0.3, 0.2, -0.4]));
        coeffs.b1 = m2(DMatrix::from_column_slice(2, 1, &[0.0, 0.0]));
        coeffs.b2 = m2(DMatrix::from_column_slice(2, 1, &[1.0, 0.5]));
        coeffs.c = m2(DMatrix::from_row_slice(2, 2, &[0.2, 0.1, -0.1, 0.3]));
        coeffs.q1 = m2(DMatrix::zeros(2, 2));
        // Q₂ = LᵀL ⪰ 0.
        coeffs.q2 = m2(DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 0.5]));
        coeffs.s1 = m2(DMatrix::zeros(2, 2));
        coeffs.s2 = m2(DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 0.8]));
        coeffs.g1 = DMatrix::identity(2, 2);
        coeffs.h1 = DMatrix::zeros(2, 2);
        coeffs.h2 = DMatrix::identity(2, 2);
        let m = DMatrix::from_row_slice(2, 2, &[0.5, 0.1, 0.1, 0.4]);

        let sol = solve_sre1(&coeffs, &m, &grid).unwrap();
        assert!(
            sol.symmetry_drift <= SYMMETRY_TOL,
            "symmetry drift {:e}",
            sol.symmetry_drift
        );
        for v in &sol.p.values {
            assert_eq!(asymmetry(v), 0.0, "stored values are symmetrised");
        }
        assert!(sol.positivity_log.iter().all(|&m| m >= POSITIVITY_TOL));
        assert!(sol.residual_sup < 1e-6, "residual {:e}", sol.residual_sup);
    }

    #[test]
    fn sre1_residual_contracts_16x_under_halving() {
        let coarse_grid = build_grid(1.0, 50).unwrap();
        let fine_grid = build_grid(1.0, 100).unwrap();
        let game = ScalarGame {
            b2: 1.0,
            s2: 1.0,
            q2: 1.0,
            a: 0.3,
            c: 0.4,
            ..ScalarGame::default()
        };
        let coarse = solve_sre1(&game.coefficients(&coarse_grid), &scalar(1.0), &coarse_grid)
            .unwrap()
            .residual_sup;
        let fine = solve_sre1(&game.coefficients(&fine_grid), &scalar(1.0), &fine_grid)
            .unwrap()
            .residual_sup;
        let ratio = coarse / fine;
        assert!(
            (8.0..32.0).contains(&ratio),
            "expected ≈16× contraction, got {ratio:.2} (coarse {coarse:e}, fine {fine:e})"
        );
    }

    #[test]
    fn sre1_monotone_in_terminal_data() {
        let grid = build_grid(1.0, 100).unwrap();
        let game = ScalarGame {
            b2: 1.0,
            q2: 1.0,
            s2: 1.0,
            ..ScalarGame::default()
        };
        let coeffs = game.coefficients(&grid);
        let mut last = f64::NEG_INFINITY;
        for m in [0.0, 0.5, 1.0, 2.0, 4.0] {
            let p0 = solve_sre1(&coeffs, &scalar(m), &grid).unwrap().p.values[0][(0, 0)];
            assert!(
                p0 >= last - 1e-12,
                "P(0) must be nondecreasing in M: {p0} after {last} (M = {m})"
            );
            last = p0;
        }
    }

    // ==================================================================
    // Scalar inverse route
    // ==================================================================

    #[test]
    fn inverse_route_matches_direct_solve() {
        let grid = build_grid(1.0, 200).unwrap();
        let coeffs = ScalarGame {
            b2: 1.0,
            s2: 1.0,
            ..ScalarGame::default()
        }
        .coefficients(&grid);
        let (sol, bounds) = scalar_sre1_via_inverse(&coeffs, 1.0, &grid).unwrap();
        assert_relative_eq!(sol.p.values[0][(0, 0)], 0.5, epsilon = 1e-8);

        let direct = solve_sre1(&coeffs, &scalar(1.0), &grid).unwrap();
        let sup = sol
            .p
            .values
            .iter()
            .zip(direct.p.values.iter())
            .map(|(a, b)| (a[(0, 0)] - b[(0, 0)]).abs())
            .fold(0.0, f64::max);
        assert!(sup <= 1e-7, "routes disagree by {sup:e}");

        // ‖C²−2A‖ = 0, ‖B₂²R₂₂⁻¹‖ = 1, T = 1 give exactly c₁ = 2, and the
        // computed inverse must respect it.
        assert_relative_eq!(bounds.c1, 2.0, epsilon = 1e-12);
        assert!(bounds.y_max <= bounds.c1 + 1e-9, "y_max {}", bounds.y_max);
        assert!(bounds.bounds_hold, "{bounds:?}");
    }

    #[test]
    fn inverse_route_constant_case_and_guards() {
        let grid = build_grid(1.0, 20).unwrap();
        // B₂=A=C=Q₂=0: y ≡ M⁻¹, so P ≡ M.
        let coeffs = ScalarGame {
            s2: 1.0,
            ..ScalarGame::default()
        }
        .coefficients(&grid);
        let (sol, _) = scalar_sre1_via_inverse(&coeffs, 2.0, &grid).unwrap();
        for v in &sol.p.values {
            assert_relative_eq!(v[(0, 0)], 2.0, epsilon = 1e-12);
        }

        assert!(scalar_sre1_via_inverse(&coeffs, 0.0, &grid).is_err());
        assert!(scalar_sre1_via_inverse(&coeffs, -1.0, &grid).is_err());

        let mut vector_valued = ScalarGame::default().coefficients(&grid);
        vector_valued.n = 2;
        assert!(scalar_sre1_via_inverse(&vector_valued, 1.0, &grid).is_err());
    }

    // ==================================================================
    // SRE-2
    // ==================================================================

    #[test]
    fn sre2_constant_solution_with_exact_gain() {
        // All dynamics and running state costs zero: P_L ≡ diag(0, G₁) and
        // 𝕂 = diag(R₁₁, S₁ + G₁) exactly.
        let grid = build_grid(1.0, 40).unwrap();
        let coeffs = ScalarGame {
            s1: 1.0,
            s2: 1.0,
            ..ScalarGame::default()
        }
        .coefficients(&grid);
        let sol = solve_sre2(&coeffs, &grid).unwrap();
        for v in &sol.p.values {
            assert_relative_eq!(v[(0, 0)], 0.0, epsilon = 1e-12);
            assert_relative_eq!(v[(0, 1)], 0.0, epsilon = 1e-12);
            assert_relative_eq!(v[(1, 1)], 1.0, epsilon = 1e-12);
        }
        // min eig 𝕂 = min(R₁₁, S₁+G₁) = min(1, 2) = 1.
        for &m in &sol.positivity_log {
            assert_relative_eq!(m, 1.0, epsilon = 1e-10);
        }
    }

    #[test]
    fn sre2_lyapunov_closed_form() {
        // ℚ = 0, 𝔹 = 0, ℂ = 0 (B₁ = C = 0, Q₁ = 0) reduces SRE-2 to the
        // Lyapunov flow P_L(t) = Φ(T,t)ᵀ diag(0,G₁) Φ(T,t) with Φ from 𝔸.
        let grid = build_grid(1.0, 100).unwrap();
        let coeffs = ScalarGame {
            a: 0.5,
            b2: 1.0,
            q2: 0.7,
            s1: 1.0,
            s2: 1.0,
            g1: 2.0,
            ..ScalarGame::default()
        }
        .coefficients(&grid);
        let sol = solve_sre2(&coeffs, &grid).unwrap();

        let blocks = assemble_sre2_blocks(&coeffs, &grid).unwrap();
        let family = fundamental_matrix(&blocks.sre2.as_ref().unwrap().a, &grid).unwrap();
        let terminal = &blocks.sre2.as_ref().unwrap().terminal;
        let mut sup = 0.0f64;
        for k in 0..grid.len() {
            let phi = &family.to_horizon[k];
            let closed = phi.transpose() * terminal * phi;
            sup = sup.max((closed - &sol.p.values[k]).abs().max());
        }
        assert!(sup <= 1e-6, "Lyapunov cross-check off by {sup:e}");
    }

    #[test]
    fn sre2_terminal_block_structure() {
        let grid = build_grid(1.0, 10).unwrap();
        let coeffs = ScalarGame {
            a: 0.3,
            b1: 1.0,
            b2: 1.0,
            c: 0.2,
            q1: 1.0,
            q2: 1.0,
            s1: 1.0,
            s2: 1.0,
            g1: 3.0,
            ..ScalarGame::default()
        }
        .coefficients(&grid);
        let sol = solve_sre2(&coeffs, &grid).unwrap();
        let terminal = &sol.p.values[10];
        assert_eq!(terminal[(0, 0)], 0.0, "top-left block exactly zero");
        assert_eq!(terminal[(0, 1)], 0.0);
        assert_eq!(terminal[(1, 1)], 3.0, "bottom-right block exactly G₁");
        assert!(sol.symmetry_drift <= SYMMETRY_TOL);
    }

    // ==================================================================
    // Convexity certificates
    // ==================================================================

    #[test]
    fn follower_certificate_three_regimes() {
        let grid = build_grid(1.0, 100).unwrap();
        let coeffs = ScalarGame {
            b2: 1.0,
            s2: 1.0,
            q2: 1.0,
            ..ScalarGame::default()
        }
        .coefficients(&grid);
        let sol = solve_sre1(&coeffs, &scalar(1.0), &grid).unwrap();
        let p0 = sol.p.values[0][(0, 0)];

        let sa1 = follower_convexity_certificate(&sol, &scalar(0.5)).unwrap();
        assert!(sa1.convex && sa1.margin > 0.0);

        let below = follower_convexity_certificate(&sol, &scalar(-p0 - 0.1)).unwrap();
        assert!(!below.convex);
        assert_relative_eq!(below.margin, -0.1, epsilon = 1e-9);

        let boundary = follower_convexity_certificate(&sol, &scalar(-p0)).unwrap();
        assert!(boundary.convex, "boundary case counts as convex");
        assert!(boundary.margin.abs() <= 1e-12);
    }

    #[test]
    fn leader_certificate_three_regimes() {
        let grid = build_grid(1.0, 50).unwrap();
        // SA-2 style data.
        let coeffs = ScalarGame {
            q1: 1.0,
            s1: 1.0,
            s2: 1.0,
            b1: 1.0,
            b2: 1.0,
            q2: 0.5,
            ..ScalarGame::default()
        }
        .coefficients(&grid);
        let sol = solve_sre2(&coeffs, &grid).unwrap();
        let ok = leader_convexity_certificate(&sol, &scalar(0.5)).unwrap();
        assert!(ok.convex, "SA-2 regime must certify, margin {}", ok.margin);

        let bottom_right = sol.p.values[0][(1, 1)];
        let bad = leader_convexity_certificate(&sol, &scalar(-2.0 * bottom_right - 1.0)).unwrap();
        assert!(!bad.convex, "constructed eigenvalue below zero");

        // Zero-cost instance: P_L ≡ 0, H₁ = 0 ⟹ margin 0, still convex.
        let zero = ScalarGame {
            s1: 1.0,
            s2: 1.0,
            g1: 1.0,
            ..ScalarGame::default()
        };
        let mut zero = zero.coefficients(&grid);
        zero.g1 = scalar(0.0);
        let zsol = solve_sre2(&zero, &grid).unwrap();
        let zc = leader_convexity_certificate(&zsol, &scalar(0.0)).unwrap();
        assert!(zc.convex);
        assert!(zc.margin.abs() <= 1e-12, "margin {:e}", zc.margin);
    }

    // ==================================================================
    // Tilde blocks and equation
    // ==================================================================

    #[test]
    fn tilde_blocks_collapse_without_initial_weights() {
        let grid = build_grid(1.0, 8).unwrap();
        let coeffs = ScalarGame {
            a: 0.4,
            b1: 1.0,
            b2: 2.0,
            c: 0.3,
            q1: 0.7,
            q2: 0.5,
            s1: 0.6,
            s2: 0.9,
            r22: 2.0,
            ..ScalarGame::default()
        }
        .coefficients(&grid);
        let blocks = assemble_tilde_blocks(&coeffs, &grid).unwrap();
        let bl = blocks.tilde.as_ref().unwrap();
        let k1 = 1.0; // B₁²/R₁₁
        let k2 = 2.0; // B₂²/R₂₂

        // H₁ = H₂ = 0 collapses everything to the raw coefficients.
        let at0 = bl.a_tilde.at(0);
        assert_eq!(at0[(0, 0)], 0.4);
        assert_eq!(at0[(0, 1)], 0.0);
        assert_eq!(at0[(1, 0)], 0.0);
        assert_eq!(at0[(1, 1)], 0.4);
        let bt0 = bl.b_tilde.at(0);
        assert_eq!(bt0[(0, 0)], -0.7);
        assert_eq!(bt0[(0, 1)], -0.5);
        assert_eq!(bt0[(1, 0)], -0.5);
        assert_eq!(bt0[(1, 1)], 0.0);
        let ah0 = bl.a_hat.at(0);
        assert_eq!(ah0[(0, 0)], k1);
        assert_eq!(ah0[(0, 1)], k2);
        assert_eq!(ah0[(1, 0)], k2);
        assert_eq!(ah0[(1, 1)], 0.0);
        let c10 = bl.c1_tilde.at(0);
        assert_eq!(c10[(0, 0)], -0.6);
        assert_eq!(c10[(0, 1)], -0.9);
        let g = &bl.g_tilde;
        assert_eq!(g[(0, 0)], -1.0, "G̃ top-left is −G₁⁻¹ when H₁ = 0");
        assert_eq!(g[(1, 1)], 0.0);
    }

    #[test]
    fn tilde_terminal_mixes_initial_weight() {
        // Scalar H₁ = 1, G₁ = 1: top-left of G̃ is −(1+1)⁻¹·1 = −1/2.
        let grid = build_grid(1.0, 4).unwrap();
        let mut game = ScalarGame::default();
        game.h1 = 1.0;
        let blocks = assemble_tilde_blocks(&game.coefficients(&grid), &grid).unwrap();
        assert_relative_eq!(
            blocks.tilde.as_ref().unwrap().g_tilde[(0, 0)],
            -0.5,
            epsilon = 1e-14
        );

        // Singular I + G₁⁻¹H₁ is refused.
        let mut sing = ScalarGame::default();
        sing.h1 = -1.0;
        let err = assemble_tilde_blocks(&sing.coefficients(&grid), &grid).unwrap_err();
        assert!(err.to_string().contains("singular"), "got: {err}");
    }

    #[test]
    fn tilde_symmetry_identities_hold_bitwise() {
        let grid = build_grid(1.0, 6).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(41);
        for _ in 0..5 {
            let game = ScalarGame {
                a: rng.random_range(-1.0..1.0),
                b1: rng.random_range(-1.0..1.0),
                b2: rng.random_range(-1.0..1.0),
                c: rng.random_range(-1.0..1.0),
                q1: rng.random_range(0.0..1.0),
                q2: rng.random_range(0.0..1.0),
                s1: rng.random_range(0.0..1.0),
                s2: rng.random_range(0.0..1.0),
                r11: rng.random_range(0.5..2.0),
                r22: rng.random_range(0.5..2.0),
                g1: rng.random_range(0.5..2.0),
                h1: rng.random_range(-0.3..0.8),
                h2: rng.random_range(-0.3..0.8),
            };
            let blocks = assemble_tilde_blocks(&game.coefficients(&grid), &grid).unwrap();
            let bl = blocks.tilde.as_ref().unwrap();
            for k in 0..grid.len() {
                assert_eq!(*bl.b_hat.at(k), bl.a_tilde.at(k).transpose());
                assert_eq!(*bl.c_hat.at(k), bl.a1_tilde.at(k).transpose());
                assert_eq!(*bl.c_tilde.at(k), bl.b1_tilde.at(k).transpose());
                assert_eq!(asymmetry(bl.a_hat.at(k)), 0.0, "Â symmetric");
                assert!(asymmetry(bl.b_tilde.at(k)) <= 1e-15, "B̃ symmetric");
            }
        }
    }

    /// Hand-built scalar tilde blocks (the solver is dimension-agnostic).
    fn scalar_tilde_blocks(
        grid: &TimeGrid,
        a_hat: f64,
        b_hat: f64,
        b_tilde: f64,
        g_tilde: f64,
    ) -> BlockCoefficients {
        let c = |v: f64| MatrixPath::constant(grid, scalar(v));
        BlockCoefficients {
            tilde: Some(TildeBlocks {
                a_tilde: c(b_hat),
                b_tilde: c(b_tilde),
                c_tilde: c(0.0),
                a1_tilde: c(0.0),
                b1_tilde: c(0.0),
                c1_tilde: c(0.0),
                a_hat: c(a_hat),
                b_hat: c(b_hat),
                c_hat: c(0.0),
                g_tilde: scalar(g_tilde),
            }),
            ..BlockCoefficients::default()
        }
    }

    #[test]
    fn tilde_zero_flow_is_constant() {
        let grid = build_grid(1.0, 16).unwrap();
        let blocks = scalar_tilde_blocks(&grid, 0.0, 0.0, 0.0, -1.0);
        let sol = solve_decoupling_tilde(&blocks, &grid).unwrap();
        for v in &sol.p.values {
            assert_eq!(v[(0, 0)], -1.0, "Â = B̂ = B̃ = 0 freezes the flow at G̃");
        }
    }

    #[test]
    fn tilde_scalar_separable_flow() {
        // Ṗ̃ = B̃P̃² with B̃ = −1, G̃ = −1: P̃(t) = −1/(1 + T − t), P̃(0) = −1/2.
        let grid = build_grid(1.0, 200).unwrap();
        let blocks = scalar_tilde_blocks(&grid, 0.0, 0.0, -1.0, -1.0);
        let sol = solve_decoupling_tilde(&blocks, &grid).unwrap();
        assert_relative_eq!(sol.p.values[0][(0, 0)], -0.5, epsilon = 1e-8);

        let closed = decoupling_tilde_closed_form(&blocks, &grid).unwrap();
        assert_relative_eq!(closed.values[0][(0, 0)], -0.5, epsilon = 1e-8);
    }

    #[test]
    fn tilde_representation_failures_are_detected() {
        // B̃ = +1 with G̃ = −1 escapes exactly at t = 0 (denominator hits a
        // node); the node gate catches it.
        let grid = build_grid(1.0, 50).unwrap();
        let blocks = scalar_tilde_blocks(&grid, 0.0, 0.0, 1.0, -1.0);
        let err = solve_decoupling_tilde(&blocks, &grid).unwrap_err();
        assert!(
            matches!(err, Error::RepresentationFailure { .. }),
            "got: {err:?}"
        );

        // Rotation instance: Â = 1, B̃ = 1, G̃ = 0 on T = 2; the denominator
        // cos(T−t) crosses zero between nodes — the sign-flip gate catches it.
        let grid2 = build_grid(2.0, 100).unwrap();
        let blocks2 = scalar_tilde_blocks(&grid2, 1.0, 0.0, 1.0, 0.0);
        let err2 = solve_decoupling_tilde(&blocks2, &grid2).unwrap_err();
        match &err2 {
            Error::RepresentationFailure { context } => {
                assert!(context.contains("sign"), "got: {context}");
            }
            other => panic!("expected RepresentationFailure, got {other:?}"),
        }
    }

    #[test]
    fn tilde_closed_form_agrees_with_direct_integration() {
        let grid = build_grid(1.0, 200).unwrap();
        let game = ScalarGame {
            a: -0.5,
            b1: 0.7,
            b2: 0.6,
            q1: 0.8,
            q2: 0.5,
            s1: 0.3,
            s2: 0.4,
            g1: 1.0,
            h1: 0.2,
            h2: 0.1,
            ..ScalarGame::default()
        };
        let blocks = assemble_tilde_blocks(&game.coefficients(&grid), &grid).unwrap();
        let direct = solve_decoupling_tilde(&blocks, &grid).unwrap();
        let closed = decoupling_tilde_closed_form(&blocks, &grid).unwrap();
        let mut sup = 0.0f64;
        for k in 0..grid.len() {
            sup = sup.max((&closed.values[k] - &direct.p.values[k]).abs().max());
        }
        assert!(sup <= 1e-6, "closed form vs direct integration: {sup:e}");
        assert!(direct.symmetry_drift <= SYMMETRY_TOL);
    }

    // ==================================================================
    // Check blocks and equation
    // ==================================================================

    #[test]
    fn check_blocks_match_hand_expansion_for_scalars() {
        let grid = build_grid(1.0, 4).unwrap();
        let (a, q1, q2, s1, s2, h1, h2, g1) = (0.4, 0.7, 0.5, 0.6, 0.9, 0.2, 0.3, 2.0);
        let game = ScalarGame {
            a,
            b1: 1.0,
            b2: 1.0,
            c: 0.25,
            q1,
            q2,
            s1,
            s2,
            g1,
            h1,
            h2,
            ..ScalarGame::default()
        };
        let alpha = DVector::from_vec(vec![1.5]);
        let beta = 0.8;
        let blocks = assemble_check_blocks(&game.coefficients(&grid), &grid, &alpha, beta).unwrap();
        let bl = blocks.check.as_ref().unwrap();
        let (k1, k2) = (1.0, 1.0);

        let a_hand = DMatrix::from_diagonal_element(4, 4, a);
        assert_relative_eq!((bl.a.at(0) - &a_hand).abs().max(), 0.0, epsilon = 1e-15);

        let b_hand = DMatrix::from_row_slice(
            4,
            4,
            &[
                -q1, 0.0, -q2, 0.0, //
                0.0, -q1, 0.0, -q2, //
                -q2, 0.0, 0.0, 0.0, //
                0.0, -q2, 0.0, 0.0,
            ],
        );
        assert_relative_eq!((bl.b.at(0) - &b_hand).abs().max(), 0.0, epsilon = 1e-15);

        let a2_hand = DMatrix::from_row_slice(
            4,
            4,
            &[
                k1, 0.0, k2, 0.0, //
                0.0, k1, 0.0, k2, //
                k2, 0.0, 0.0, 0.0, //
                0.0, k2, 0.0, 0.0,
            ],
        );
        assert_relative_eq!((bl.a2.at(0) - &a2_hand).abs().max(), 0.0, epsilon = 1e-15);

        let c = 0.25;
        let a1_hand = DMatrix::from_row_slice(
            4,
            4,
            &[
                0.0, 0.0, 0.0, 0.0, //
                c, c, 0.0, 0.0, //
                0.0, 0.0, 0.0, 0.0, //
                0.0, 0.0, c, c,
            ],
        );
        assert_relative_eq!((bl.a1.at(0) - &a1_hand).abs().max(), 0.0, epsilon = 1e-15);

        let b1_hand = DMatrix::from_row_slice(
            4,
            4,
            &[
                0.0, 0.0, 0.0, 0.0, //
                0.0, -s1, 0.0, -s2, //
                0.0, 0.0, 0.0, 0.0, //
                0.0, -s2, 0.0, 0.0,
            ],
        );
        assert_relative_eq!((bl.b1.at(0) - &b1_hand).abs().max(), 0.0, epsilon = 1e-15);

        let d2_hand = DMatrix::from_row_slice(
            4,
            4,
            &[
                0.0, c, 0.0, 0.0, //
                0.0, -c, 0.0, 0.0, //
                0.0, 0.0, 0.0, c, //
                0.0, 0.0, 0.0, -c,
            ],
        );
        assert_relative_eq!((bl.d2.at(0) - &d2_hand).abs().max(), 0.0, epsilon = 1e-15);

        let h_hand = DMatrix::from_row_slice(
            4,
            4,
            &[
                h1, 0.0, h2, 0.0, //
                0.0, h1, 0.0, h2, //
                h2, 0.0, 0.0, 0.0, //
                0.0, h2, 0.0, 0.0,
            ],
        );
        assert_relative_eq!((&bl.h - &h_hand).abs().max(), 0.0, epsilon = 1e-15);

        // Scalar speciality: the constrained block of Ǧ vanishes because the
        // single mean degree of freedom is pinned by the constraint.
        assert_relative_eq!(bl.g[(0, 0)], 0.0, epsilon = 1e-15);
        assert_relative_eq!(bl.g[(1, 1)], -1.0 / g1, epsilon = 1e-15);
        // f̌ top entry G₁⁻¹αβ/⟨α,G₁⁻¹α⟩ = β/α for scalars.
        assert_relative_eq!(bl.f[0], beta / 1.5, epsilon = 1e-15);

        // Bar identities recomputed by hand.
        let ab_hand = bl.a.at(0) + &h_hand * bl.a2.at(0);
        assert_relative_eq!((bl.a_bar.at(0) - ab_hand).abs().max(), 0.0, epsilon = 1e-14);
        let bb_hand =
            bl.a.at(0) * &h_hand + bl.b.at(0) + &h_hand * bl.a2.at(0) * &h_hand + &h_hand * bl.b2.at(0);
        assert_relative_eq!((bl.b_bar.at(0) - bb_hand).abs().max(), 0.0, epsilon = 1e-14);
        let c1b_hand = bl.b1.at(0) + &h_hand;
        assert_relative_eq!(
            (bl.c1_bar.at(0) - c1b_hand).abs().max(),
            0.0,
            epsilon = 1e-14
        );
    }

    #[test]
    fn check_guards_reject_degenerate_data() {
        let grid = build_grid(1.0, 4).unwrap();
        let coeffs = ScalarGame::default().coefficients(&grid);
        let zero_alpha = DVector::from_vec(vec![0.0]);
        assert!(assemble_check_blocks(&coeffs, &grid, &zero_alpha, 0.0).is_err());

        let mut sing = ScalarGame::default();
        sing.h1 = -1.0; // I + G₁⁻¹H₁ = 0
        let alpha = DVector::from_vec(vec![1.0]);
        let err =
            assemble_check_blocks(&sing.coefficients(&grid), &grid, &alpha, 0.0).unwrap_err();
        assert!(err.to_string().contains("singular"), "got: {err}");
    }

    #[test]
    fn check_offset_vanishes_for_homogeneous_data() {
        let grid = build_grid(1.0, 32).unwrap();
        let game = ScalarGame {
            a: 0.3,
            b1: 1.0,
            b2: 1.0,
            q1: 0.5,
            q2: 0.4,
            h1: 0.2,
            h2: 0.1,
            ..ScalarGame::default()
        };
        let alpha = DVector::from_vec(vec![1.0]);
        let blocks = assemble_check_blocks(&game.coefficients(&grid), &grid, &alpha, 0.0).unwrap();
        let sol = solve_decoupling_check(&blocks, &grid).unwrap();
        assert_eq!(
            sol.p_small.max_abs(),
            0.0,
            "β = 0 makes the offset equation homogeneous"
        );
    }

    #[test]
    fn check_terminal_without_initial_weights_is_g() {
        let grid = build_grid(1.0, 16).unwrap();
        let game = ScalarGame {
            a: 0.2,
            b1: 1.0,
            b2: 1.0,
            q1: 0.3,
            q2: 0.2,
            ..ScalarGame::default()
        };
        let alpha = DVector::from_vec(vec![1.0]);
        let blocks = assemble_check_blocks(&game.coefficients(&grid), &grid, &alpha, 0.5).unwrap();
        let bl = blocks.check.as_ref().unwrap();
        assert_relative_eq!((&bl.terminal_p - &bl.g).abs().max(), 0.0, epsilon = 1e-14);
        let sol = solve_decoupling_check(&blocks, &grid).unwrap();
        assert_relative_eq!(
            (&sol.p.p.values[16] - &bl.g).abs().max(),
            0.0,
            epsilon = 1e-14
        );
    }

    #[test]
    fn check_closed_form_agrees_with_direct_integration() {
        let grid = build_grid(1.0, 200).unwrap();
        let game = ScalarGame {
            a: -0.4,
            b1: 0.8,
            b2: 0.7,
            q1: 0.6,
            q2: 0.4,
            s1: 0.5,
            s2: 0.3,
            g1: 1.5,
            h1: 0.25,
            h2: 0.15,
            ..ScalarGame::default()
        };
        let alpha = DVector::from_vec(vec![1.0]);
        let blocks = assemble_check_blocks(&game.coefficients(&grid), &grid, &alpha, 0.7).unwrap();
        let direct = solve_decoupling_check(&blocks, &grid).unwrap();
        let closed = decoupling_check_closed_form(&blocks, &grid).unwrap();
        let mut sup = 0.0f64;
        for k in 0..grid.len() {
            sup = sup.max((&closed.values[k] - &direct.p.p.values[k]).abs().max());
        }
        assert!(sup <= 1e-6, "closed form vs direct integration: {sup:e}");
    }

    // ==================================================================
    // Completion of squares
    // ==================================================================

    #[test]
    fn auxiliary_cost_completion_of_squares() {
        // For x(T) = 0 and deterministic u₂ the state is the backward ODE
        // ẋ = Ax + B₂u₂ (z ≡ 0), and the auxiliary cost
        //   𝒥(u₂) = ∫ [Q₂x² + S₂z² + R₂₂u₂²] ds + H₂x(0)²
        // must equal
        //   (H₂+P(0))x(0)² + ∫ R₂₂(u₂+R₂₂⁻¹B₂ᵀPx)² ds
        //                  + ∫ ⟨(P+S₂)⁻¹(CᵀPx), CᵀPx⟩ ds
        // with P the SRE-1 solution for M = 0.  C ≠ 0 keeps the third term
        // alive even though z ≡ 0.
        let grid = build_grid(1.0, 800).unwrap();
        let game = ScalarGame {
            a: 0.3,
            b2: 1.0,
            c: 0.4,
            q2: 0.8,
            s2: 1.0,
            h2: 0.2,
            ..ScalarGame::default()
        };
        let coeffs = game.coefficients(&grid);
        let p = solve_sre1(&coeffs, &scalar(0.0), &grid).unwrap();

        let mut rng = ChaCha12Rng::seed_from_u64(99);
        for _ in 0..3 {
            let (c0, c1, c2) = (
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            );
            let u2 = |t: f64| c0 + c1 * t + c2 * (3.0 * t).sin();

            // Backward state: ẋ = Ax + B₂u₂, x(T) = 0.
            let mut x = vec![0.0f64; grid.len()];
            let rhs = |t: f64, v: &DMatrix<f64>| -> DMatrix<f64> {
                scalar(game.a * v[(0, 0)] + game.b2 * u2(t))
            };
            for k in (0..grid.steps).rev() {
                let from = grid.nodes[k + 1];
                let stepped = rk4_step(&rhs, from, &scalar(x[k + 1]), grid.nodes[k] - from);
                x[k] = stepped[(0, 0)];
            }

            let direct: Vec<f64> = (0..grid.len())
                .map(|k| {
                    let t = grid.nodes[k];
                    game.q2 * x[k] * x[k] + game.r22 * u2(t) * u2(t)
                })
                .collect();
            let lhs = trapezoid(&direct, grid.dt()) + game.h2 * x[0] * x[0];

            let completed: Vec<f64> = (0..grid.len())
                .map(|k| {
                    let t = grid.nodes[k];
                    let pk = p.p.values[k][(0, 0)];
                    let feedback = u2(t) + game.b2 * pk * x[k] / game.r22;
                    let cross = game.c * pk * x[k];
                    game.r22 * feedback * feedback + cross * cross / (pk + game.s2)
                })
                .collect();
            let rhs_val =
                (game.h2 + p.p.values[0][(0, 0)]) * x[0] * x[0] + trapezoid(&completed, grid.dt());

            assert_relative_eq!(lhs, rhs_val, epsilon = 1e-6, max_relative = 1e-6);
        }
    }
}
