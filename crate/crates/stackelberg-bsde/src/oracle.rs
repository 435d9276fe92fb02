//! Discrete-time ground truth: an independently coded bilevel quadratic
//! program that cross-checks the continuous-time solvers.
//!
//! The oracle prices the *deterministic subclass* of the game — terminal
//! data, controls, and therefore the state are deterministic, so the
//! martingale integrand vanishes identically (`Z ≡ 0`) and the diffusion
//! weights `S₁`, `S₂` price nothing.  On that subclass the backward dynamics
//! collapse to an ODE, which the oracle discretises by **backward Euler**,
//! deliberately a different scheme (1st order) than the solvers' 4th-order
//! Runge–Kutta so that agreement between the two routes is evidence rather
//! than a tautology:
//!
//! ```text
//!     X_k = X_{k+1} − Δt·(A_k X_k + B₁,k u₁,k + B₂,k u₂,k),    X_N = ξ,
//! ```
//!
//! i.e. `X_k = M_k (X_{k+1} − Δt B₁,k u₁,k − Δt B₂,k u₂,k)` with
//! `M_k = (I + Δt A_k)⁻¹`.  Decision variables are the terminal choice
//! `ξ ∈ ℝⁿ` and the piecewise-constant controls `u₁ ∈ ℝ^{m₁×N}`,
//! `u₂ ∈ ℝ^{m₂×N}` (constant on `[t_k, t_{k+1})`).  Stacking them into
//! `d = (ξ, u₁,₀, …, u₁,N₋₁, u₂,₀, …, u₂,N₋₁)`, both costs are *exact*
//! quadratic forms
//!
//! ```text
//!     J_i(d) = ½ dᵀ Q̂_i d,
//! ```
//!
//! assembled from the stacked state operator (every node of `X` is linear in
//! `d`), rectangle quadrature `Δt·Σ_{k<N}` for the running weights, the
//! terminal weight `G₁` (leader only) at node `N`, and the initial weights
//! `H_i` at node `0`.
//!
//! The two levels of the game then reduce to finite-dimensional convex
//! optimisation with no iteration whatsoever:
//!
//! * **follower**: an unconstrained QP in the `u₂` block, solved exactly by a
//!   partitioned Cholesky solve ([`oracle_follower`]);
//! * **leader**: substitute the follower's linear response `u₂ = S·(ξ, u₁)`,
//!   then minimise the reduced QP over `(ξ, u₁)` subject to the terminal
//!   constraints — pointwise bounds from the constraint set plus the optional
//!   affine half-space `⟨α, ξ⟩ ≥ β` — by enumerating active sets and solving
//!   each candidate's KKT system exactly ([`oracle_leader`]).
//!
//! Multiplier convention: the leader Lagrangian is
//! `J₁ − Σ μᵢ (aᵢᵀξ − bᵢ)` with every constraint written as `aᵢᵀξ ≥ bᵢ`, so
//! `μᵢ ≥ 0` at a minimiser and the affine row's multiplier is directly
//! comparable to the continuous solver's `λ` — both Lagrangians live in raw
//! cost units.
//!
//! [`compare`] measures a continuous solution against the oracle; a
//! convergence table is produced by calling it (or the individual solvers)
//! on grids `N ∈ {16, 32, 64, 128}` and fitting [`convergence_slope`] to the
//! observed gaps, which should decay like `O(Δt)`.

use nalgebra::{DMatrix, DVector};

use crate::constraints::ConvexSet;
use crate::error::{Error, Result};
use crate::follower::GameCoefficients;
use crate::leader::EquilibriumSolution;

// ======================================================================
// Tolerances and caps
// ======================================================================

/// Hard cap on the number of time steps the oracle accepts.  The oracle is a
/// ground-truth device for small instances, not a production discretisation;
/// the cap keeps the dense quadratic forms small enough to assemble exactly.
pub const ORACLE_MAX_STEPS: usize = 128;

/// Bound every oracle solution's KKT residual must satisfy.  The solves are
/// direct (Cholesky / LU), so residuals sit at roundoff level — anything
/// larger indicates an assembly bug, not discretisation error.
pub const ORACLE_KKT_TOL: f64 = 1e-10;

/// Hard cap on the number of active-set candidates [`oracle_leader`]
/// enumerates (`2^#inequality-rows`).
pub const ORACLE_ACTIVE_SET_CAP: usize = 1 << 12;

/// Dual-feasibility slack when validating an active-set candidate: a
/// multiplier may dip this far below zero before the candidate is rejected.
const MULTIPLIER_TOL: f64 = 1e-9;

/// Primal-feasibility slack (relative to `1 + |bᵢ|`) allowed on inactive
/// rows when validating an active-set candidate.
const FEASIBILITY_TOL: f64 = 1e-9;

/// Relative residual above which a candidate KKT solve is discarded as
/// numerically meaningless (nearly singular active set).
const KKT_SOLVE_TOL: f64 = 1e-8;

// ======================================================================
// The discrete game
// ======================================================================

/// A fully discrete instance of the two-level game.
///
/// Wraps the same coefficient bundle the continuous solvers consume; the
/// diffusion fields (`C`, `S₁`, `S₂`) are carried along but price nothing,
/// because the oracle restricts to the deterministic subclass where `Z ≡ 0`.
#[derive(Debug, Clone)]
pub struct DiscreteGame {
    /// Game coefficients, including the grid (`≤` [`ORACLE_MAX_STEPS`] steps).
    pub coeffs: GameCoefficients,
    /// Pointwise terminal constraint set `K` for `ξ`.
    pub set: ConvexSet,
    /// Optional affine terminal constraint `⟨α, ξ⟩ ≥ β`.
    pub affine: Option<(DVector<f64>, f64)>,
}

impl DiscreteGame {
    /// Validates and wraps a discrete instance.
    ///
    /// # Errors
    ///
    /// * `InstanceTooLarge` if the grid exceeds [`ORACLE_MAX_STEPS`] steps.
    /// * `DimensionMismatch` if `K` or `α` does not live in ℝⁿ.
    /// * `InvalidArgument` for a zero `α` or coefficients that fail their own
    ///   shape/symmetry checks.
    pub fn new(
        coeffs: GameCoefficients,
        set: ConvexSet,
        affine: Option<(DVector<f64>, f64)>,
    ) -> Result<Self> {
        coeffs.validate()?;
        let steps = coeffs.grid().steps;
        if steps > ORACLE_MAX_STEPS {
            return Err(Error::InstanceTooLarge {
                context: format!(
                    "oracle grid has {steps} steps, cap is {ORACLE_MAX_STEPS}"
                ),
            });
        }
        set.validate()?;
        if set.dim() != coeffs.n {
            return Err(Error::DimensionMismatch {
                context: format!(
                    "constraint set lives in ℝ^{}, state in ℝ^{}",
                    set.dim(),
                    coeffs.n
                ),
            });
        }
        if let Some((alpha, beta)) = &affine {
            if alpha.len() != coeffs.n {
                return Err(Error::DimensionMismatch {
                    context: format!(
                        "affine normal has {} entries, state dimension is {}",
                        alpha.len(),
                        coeffs.n
                    ),
                });
            }
            if alpha.amax() == 0.0 {
                return Err(Error::invalid("alpha", "affine normal must be nonzero"));
            }
            if !beta.is_finite() {
                return Err(Error::invalid("beta", "affine offset must be finite"));
            }
        }
        Ok(DiscreteGame {
            coeffs,
            set,
            affine,
        })
    }
}

// ======================================================================
// Quadratic model assembly
// ======================================================================

/// Both costs as exact quadratic forms in the stacked decision vector, plus
/// the stacked state operator used to rebuild trajectories.
struct QuadraticModel {
    n: usize,
    m1: usize,
    m2: usize,
    steps: usize,
    /// Length of the stacked decision vector `n + N·(m₁ + m₂)`.
    dim: usize,
    /// `(N+1)·n × dim` operator: rows `k·n..(k+1)·n` map `d` to `X_k`.
    state_op: DMatrix<f64>,
    /// Leader Hessian: `J₁(d) = ½ dᵀ q1 d`.
    q1: DMatrix<f64>,
    /// Follower Hessian: `J₂(d) = ½ dᵀ q2 d`.
    q2: DMatrix<f64>,
}

/// Adds `block` into `dst` at `(row, col)`.
fn add_block(dst: &mut DMatrix<f64>, row: usize, col: usize, block: &DMatrix<f64>) {
    for j in 0..block.ncols() {
        for i in 0..block.nrows() {
            dst[(row + i, col + j)] += block[(i, j)];
        }
    }
}

impl QuadraticModel {
    /// First column of the step-`k` block of `u₁`.
    fn u1_col(&self, k: usize) -> usize {
        self.n + k * self.m1
    }

    /// First column of the step-`k` block of `u₂`.
    fn u2_col(&self, k: usize) -> usize {
        self.n + self.steps * self.m1 + k * self.m2
    }

    /// Number of leading coordinates the leader controls: `(ξ, u₁)`.
    fn leader_len(&self) -> usize {
        self.n + self.steps * self.m1
    }

    /// Number of trailing coordinates the follower controls: `u₂`.
    fn follower_len(&self) -> usize {
        self.steps * self.m2
    }

    /// Assembles the state operator and both Hessians.
    fn build(dg: &DiscreteGame) -> Result<Self> {
        let coeffs = &dg.coeffs;
        let grid = coeffs.grid();
        let (n, m1, m2) = (coeffs.n, coeffs.m1, coeffs.m2);
        let steps = grid.steps;
        let dt = grid.dt();
        let dim = n + steps * (m1 + m2);

        let mut model = QuadraticModel {
            n,
            m1,
            m2,
            steps,
            dim,
            state_op: DMatrix::zeros((steps + 1) * n, dim),
            q1: DMatrix::zeros(dim, dim),
            q2: DMatrix::zeros(dim, dim),
        };

        // --- state operator by downward recursion --------------------------
        // Row block N is X_N = ξ; each step below multiplies by
        // M_k = (I + Δt A_k)⁻¹ and injects the step-k controls, which by
        // construction have zero columns in every block above.
        let identity = DMatrix::<f64>::identity(n, n);
        let mut cur = DMatrix::zeros(n, dim);
        cur.view_mut((0, 0), (n, n)).copy_from(&identity);
        model
            .state_op
            .view_mut((steps * n, 0), (n, dim))
            .copy_from(&cur);
        for k in (0..steps).rev() {
            let stepper = &identity + coeffs.a.at(k) * dt;
            let m_k = stepper.try_inverse().ok_or(Error::RepresentationFailure {
                context: format!(
                    "(I + Δt·A) is singular at node {k}; refine the grid"
                ),
            })?;
            cur = &m_k * cur;
            let inj1 = &m_k * coeffs.b1.at(k) * (-dt);
            cur.view_mut((0, model.u1_col(k)), (n, m1)).copy_from(&inj1);
            let inj2 = &m_k * coeffs.b2.at(k) * (-dt);
            cur.view_mut((0, model.u2_col(k)), (n, m2)).copy_from(&inj2);
            model.state_op.view_mut((k * n, 0), (n, dim)).copy_from(&cur);
        }

        // --- state-dependent cost weights ----------------------------------
        // Running weights use the rectangle rule Δt·Σ_{k<N}; node N carries
        // the leader's terminal weight G₁ (the follower has none); node 0
        // additionally carries the initial weights H₁, H₂.
        for k in 0..=steps {
            let rows = model.state_op.view((k * n, 0), (n, dim));
            let rows_t = rows.transpose();
            let mut w1 = if k < steps {
                coeffs.q1.at(k) * dt
            } else {
                coeffs.g1.clone()
            };
            let mut w2 = if k < steps {
                coeffs.q2.at(k) * dt
            } else {
                DMatrix::zeros(n, n)
            };
            if k == 0 {
                w1 += &coeffs.h1;
                w2 += &coeffs.h2;
            }
            if w1.amax() != 0.0 {
                model.q1 += &rows_t * w1 * rows;
            }
            if w2.amax() != 0.0 {
                model.q2 += &rows_t * w2 * rows;
            }
        }

        // --- control running weights ---------------------------------------
        for k in 0..steps {
            let (c1, c2) = (model.u1_col(k), model.u2_col(k));
            let r1 = coeffs.r11.at(k) * dt;
            add_block(&mut model.q1, c1, c1, &r1);
            let r2 = coeffs.r22.at(k) * dt;
            add_block(&mut model.q2, c2, c2, &r2);
        }

        // Kill the roundoff asymmetry the products introduce.
        model.q1 = (&model.q1 + model.q1.transpose()) * 0.5;
        model.q2 = (&model.q2 + model.q2.transpose()) * 0.5;
        Ok(model)
    }

    /// Stacks `(ξ, u₁, u₂)` into a decision vector.
    fn pack(&self, xi: &DVector<f64>, u1: &[DVector<f64>], u2: &[DVector<f64>]) -> DVector<f64> {
        let mut d = DVector::zeros(self.dim);
        d.rows_mut(0, self.n).copy_from(xi);
        for k in 0..self.steps {
            d.rows_mut(self.u1_col(k), self.m1).copy_from(&u1[k]);
            d.rows_mut(self.u2_col(k), self.m2).copy_from(&u2[k]);
        }
        d
    }

    /// Evaluates `½ dᵀ Q d`.
    fn cost(&self, q: &DMatrix<f64>, d: &DVector<f64>) -> f64 {
        0.5 * d.dot(&(q * d))
    }

    /// Splits a stacked control block back into per-step vectors.
    fn unstack(&self, flat: &DVector<f64>, width: usize) -> Vec<DVector<f64>> {
        (0..self.steps)
            .map(|k| DVector::from_column_slice(&flat.as_slice()[k * width..(k + 1) * width]))
            .collect()
    }
}

/// Smallest eigenvalue of the symmetric part of `m`.
fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    let sym = (m + m.transpose()) * 0.5;
    sym.symmetric_eigen().eigenvalues.min()
}

// ======================================================================
// Follower oracle
// ======================================================================

/// Exact minimiser of the discrete follower cost for fixed leader choices.
#[derive(Debug, Clone)]
pub struct FollowerOracle {
    /// Optimal follower control, one vector per step (length `N`).
    pub u2: Vec<DVector<f64>>,
    /// The minimal follower cost `J₂*`.
    pub j2: f64,
    /// Sup-norm of the stationarity residual of the solved QP.
    pub kkt_residual: f64,
}

/// Solves the follower's discrete problem exactly: minimise `J₂` over the
/// `u₂` block with `(ξ, u₁)` held fixed.
///
/// The `u₂-u₂` block of the follower Hessian must be positive definite —
/// this is the discrete counterpart of the continuous convexity certificate,
/// and an indefinite block is reported as `NotConvex` with the offending
/// minimum eigenvalue (at the natural `Δt` scaling of the discrete form).
///
/// # Errors
///
/// * `DimensionMismatch` if `ξ` or `u₁` has the wrong shape (`u₁` must carry
///   one `m₁`-vector per step).
/// * `NotConvex` if the `u₂` block of the Hessian is not positive definite.
/// * `RepresentationFailure` if an implicit Euler step is singular.
pub fn oracle_follower(
    dg: &DiscreteGame,
    xi: &DVector<f64>,
    u1: &[DVector<f64>],
) -> Result<FollowerOracle> {
    let model = QuadraticModel::build(dg)?;
    check_leader_inputs(&model, xi, u1)?;

    let ny = model.leader_len();
    let nu = model.follower_len();
    let a_uu = model.q2.view((ny, ny), (nu, nu)).into_owned();
    let a_uy = model.q2.view((ny, 0), (nu, ny)).into_owned();

    let chol = nalgebra::Cholesky::new(a_uu.clone()).ok_or_else(|| Error::NotConvex {
        context: "discrete follower Hessian (u₂ block) is not positive definite".to_string(),
        margin: min_eigenvalue(&a_uu),
    })?;

    let mut y = DVector::zeros(ny);
    y.rows_mut(0, model.n).copy_from(xi);
    for k in 0..model.steps {
        y.rows_mut(model.u1_col(k), model.m1).copy_from(&u1[k]);
    }
    let grad = &a_uy * &y;
    let u2_flat = chol.solve(&(-&grad));
    let kkt_residual = (&a_uu * &u2_flat + grad).amax();

    let u2 = model.unstack(&u2_flat, model.m2);
    let d = model.pack(xi, u1, &u2);
    let j2 = model.cost(&model.q2, &d);
    Ok(FollowerOracle {
        u2,
        j2,
        kkt_residual,
    })
}

/// Shape checks shared by both oracles' leader-side inputs.
fn check_leader_inputs(
    model: &QuadraticModel,
    xi: &DVector<f64>,
    u1: &[DVector<f64>],
) -> Result<()> {
    if xi.len() != model.n {
        return Err(Error::DimensionMismatch {
            context: format!("ξ has {} entries, state dimension is {}", xi.len(), model.n),
        });
    }
    if u1.len() != model.steps {
        return Err(Error::DimensionMismatch {
            context: format!(
                "u₁ carries {} steps, the grid has {}",
                u1.len(),
                model.steps
            ),
        });
    }
    for (k, v) in u1.iter().enumerate() {
        if v.len() != model.m1 {
            return Err(Error::DimensionMismatch {
                context: format!(
                    "u₁ step {k} has {} entries, control dimension is {}",
                    v.len(),
                    model.m1
                ),
            });
        }
    }
    Ok(())
}

// ======================================================================
// Leader oracle
// ======================================================================

/// Which kind of constraint a row encodes (all rows are stored as
/// `aᵀξ ≥ b`; equalities demand `aᵀξ = b`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum RowKind {
    /// A coordinate of a `Point` set — always active.
    Equality,
    /// A pointwise bound from the constraint set (orthant, box, half-space).
    Bound,
    /// The affine constraint `⟨α, ξ⟩ ≥ β`.
    Affine,
}

/// One terminal-constraint row, padded to act on the full `(ξ, u₁)` vector.
struct ConstraintRow {
    a: DVector<f64>,
    b: f64,
    kind: RowKind,
}

/// Builds the constraint rows for the leader QP in their canonical order:
/// `Point` equalities (ascending component), then lower bounds (ascending
/// component), then upper bounds, then the half-space row, then the affine
/// row last.  `bound_multipliers` in [`OracleSolution`] follows this order
/// (affine excluded).
fn constraint_rows(dg: &DiscreteGame, ny: usize) -> Vec<ConstraintRow> {
    let n = dg.coeffs.n;
    let unit = |i: usize, sign: f64| {
        let mut a = DVector::zeros(ny);
        a[i] = sign;
        a
    };
    let mut rows = Vec::new();
    match &dg.set {
        ConvexSet::FullSpace(_) => {}
        ConvexSet::Point(c) => {
            for i in 0..n {
                rows.push(ConstraintRow {
                    a: unit(i, 1.0),
                    b: c[i],
                    kind: RowKind::Equality,
                });
            }
        }
        ConvexSet::NonnegativeOrthant(_) => {
            for i in 0..n {
                rows.push(ConstraintRow {
                    a: unit(i, 1.0),
                    b: 0.0,
                    kind: RowKind::Bound,
                });
            }
        }
        ConvexSet::Box { lower, upper } => {
            for i in 0..n {
                if lower[i].is_finite() {
                    rows.push(ConstraintRow {
                        a: unit(i, 1.0),
                        b: lower[i],
                        kind: RowKind::Bound,
                    });
                }
            }
            for i in 0..n {
                if upper[i].is_finite() {
                    rows.push(ConstraintRow {
                        a: unit(i, -1.0),
                        b: -upper[i],
                        kind: RowKind::Bound,
                    });
                }
            }
        }
        ConvexSet::Halfspace { normal, offset } => {
            // ⟨normal, ξ⟩ ≤ offset  ⇔  ⟨−normal, ξ⟩ ≥ −offset.
            let mut a = DVector::zeros(ny);
            a.rows_mut(0, n).copy_from(&(-normal));
            rows.push(ConstraintRow {
                a,
                b: -offset,
                kind: RowKind::Bound,
            });
        }
    }
    if let Some((alpha, beta)) = &dg.affine {
        let mut a = DVector::zeros(ny);
        a.rows_mut(0, n).copy_from(alpha);
        rows.push(ConstraintRow {
            a,
            b: *beta,
            kind: RowKind::Affine,
        });
    }
    rows
}

/// Complete solution of the discrete bilevel problem.
#[derive(Debug, Clone)]
pub struct OracleSolution {
    /// Optimal terminal choice `ξ*`.
    pub xi: DVector<f64>,
    /// Optimal leader control, one vector per step.
    pub u1: Vec<DVector<f64>>,
    /// The follower's exact best response to `(ξ*, u₁*)`.
    pub u2: Vec<DVector<f64>>,
    /// Leader cost at the solution.
    pub j1: f64,
    /// Follower cost at the solution.
    pub j2: f64,
    /// Multiplier of the affine row (`0` when absent or inactive).
    pub affine_multiplier: f64,
    /// Multipliers of the pointwise rows, in the canonical row order
    /// (equalities, lower bounds, upper bounds, half-space); inactive rows
    /// report `0`.
    pub bound_multipliers: Vec<f64>,
    /// Worst KKT residual: stationarity, primal and dual feasibility, and
    /// complementary slackness, all in sup-norm.
    pub kkt_residual: f64,
}

/// Solves the discrete bilevel problem exactly.
///
/// Substitutes the follower's linear response into `J₁` and minimises the
/// reduced QP over `(ξ, u₁)` by enumerating the `2^#rows` active sets of the
/// inequality rows (equalities are always active).  Every candidate KKT
/// system is solved directly; a candidate is accepted when its multipliers
/// are dual-feasible and the inactive rows are satisfied, and the accepted
/// candidate with the smallest `J₁` wins.  For a convex QP every accepted
/// candidate is a global minimiser, so the minimum is just a tie-break.
///
/// # Errors
///
/// * `NotConvex` if the follower block is not positive definite or the
///   reduced leader Hessian is not positive semidefinite.
/// * `InstanceTooLarge` if the enumeration would exceed
///   [`ORACLE_ACTIVE_SET_CAP`] candidates.
/// * `RepresentationFailure` if no active set yields a KKT-consistent
///   candidate (an infeasible constraint system).
pub fn oracle_leader(dg: &DiscreteGame) -> Result<OracleSolution> {
    let model = QuadraticModel::build(dg)?;
    let ny = model.leader_len();
    let nu = model.follower_len();

    // --- follower response -------------------------------------------------
    let a_uu = model.q2.view((ny, ny), (nu, nu)).into_owned();
    let a_uy = model.q2.view((ny, 0), (nu, ny)).into_owned();
    let chol = nalgebra::Cholesky::new(a_uu.clone()).ok_or_else(|| Error::NotConvex {
        context: "discrete follower Hessian (u₂ block) is not positive definite".to_string(),
        margin: min_eigenvalue(&a_uu),
    })?;
    let response = -chol.solve(&a_uy); // u₂ = response · (ξ, u₁)

    // --- reduced leader Hessian ---------------------------------------------
    let mut lift = DMatrix::zeros(ny + nu, ny);
    lift.view_mut((0, 0), (ny, ny)).fill_with_identity();
    lift.view_mut((ny, 0), (nu, ny)).copy_from(&response);
    let mut h_red = lift.transpose() * &model.q1 * &lift;
    h_red = (&h_red + h_red.transpose()) * 0.5;
    let h_scale = 1.0 + h_red.amax();
    let h_margin = min_eigenvalue(&h_red);
    if h_margin < -1e-9 * h_scale {
        return Err(Error::NotConvex {
            context: "reduced leader Hessian (after substituting the follower response) \
                      is not positive semidefinite"
                .to_string(),
            margin: h_margin,
        });
    }

    // --- constraint rows and enumeration budget ------------------------------
    let rows = constraint_rows(dg, ny);
    let equalities: Vec<usize> = (0..rows.len())
        .filter(|&i| rows[i].kind == RowKind::Equality)
        .collect();
    let inequalities: Vec<usize> = (0..rows.len())
        .filter(|&i| rows[i].kind != RowKind::Equality)
        .collect();
    if inequalities.len() >= usize::BITS as usize
        || (1usize << inequalities.len()) > ORACLE_ACTIVE_SET_CAP
    {
        return Err(Error::InstanceTooLarge {
            context: format!(
                "active-set enumeration needs 2^{} candidates, cap is {}",
                inequalities.len(),
                ORACLE_ACTIVE_SET_CAP
            ),
        });
    }

    // --- enumerate ------------------------------------------------------------
    let mut best: Option<(f64, DVector<f64>, Vec<f64>)> = None;
    for mask in 0usize..(1 << inequalities.len()) {
        let mut active = equalities.clone();
        active.extend(
            inequalities
                .iter()
                .enumerate()
                .filter(|(j, _)| mask & (1 << j) != 0)
                .map(|(_, &i)| i),
        );
        let na = active.len();

        // KKT system  [H  −Aᵀ; A  0]·[y; μ] = [0; b]  for the active rows.
        let mut kkt = DMatrix::zeros(ny + na, ny + na);
        kkt.view_mut((0, 0), (ny, ny)).copy_from(&h_red);
        let mut rhs = DVector::zeros(ny + na);
        for (j, &i) in active.iter().enumerate() {
            for c in 0..ny {
                kkt[(c, ny + j)] = -rows[i].a[c];
                kkt[(ny + j, c)] = rows[i].a[c];
            }
            rhs[ny + j] = rows[i].b;
        }
        let Some(sol) = kkt.clone().lu().solve(&rhs) else {
            continue;
        };
        // Discard solves contaminated by near-singularity.
        let resid = (&kkt * &sol - &rhs).amax();
        if resid > KKT_SOLVE_TOL * (1.0 + rhs.amax() + sol.amax()) {
            continue;
        }

        let y = sol.rows(0, ny).into_owned();
        let mut mu = vec![0.0; rows.len()];
        for (j, &i) in active.iter().enumerate() {
            mu[i] = sol[ny + j];
        }
        // Dual feasibility on active inequalities.
        if active
            .iter()
            .any(|&i| rows[i].kind != RowKind::Equality && mu[i] < -MULTIPLIER_TOL)
        {
            continue;
        }
        // Primal feasibility on inactive rows.
        let feasible = inequalities.iter().all(|&i| {
            active.contains(&i)
                || rows[i].a.dot(&y) - rows[i].b >= -FEASIBILITY_TOL * (1.0 + rows[i].b.abs())
        });
        if !feasible {
            continue;
        }

        let j1 = 0.5 * y.dot(&(&h_red * &y));
        if best.as_ref().is_none_or(|(b, _, _)| j1 < b - 1e-12) {
            best = Some((j1, y, mu));
        }
    }

    let Some((j1, y, mu)) = best else {
        return Err(Error::RepresentationFailure {
            context: "active-set enumeration found no KKT-consistent candidate \
                      (is the constraint system feasible?)"
                .to_string(),
        });
    };

    // --- assemble the solution --------------------------------------------
    let xi = y.rows(0, model.n).into_owned();
    let u1_flat = y.rows(model.n, model.steps * model.m1).into_owned();
    let u1 = model.unstack(&u1_flat, model.m1);
    let u2_flat = &response * &y;
    let u2 = model.unstack(&u2_flat, model.m2);
    let d = model.pack(&xi, &u1, &u2);
    let j2 = model.cost(&model.q2, &d);

    // Worst KKT residual over stationarity, feasibility, duality, slackness.
    let mut stationarity = &h_red * &y;
    for (i, row) in rows.iter().enumerate() {
        stationarity -= &row.a * mu[i];
    }
    let mut kkt_residual: f64 = if ny > 0 { stationarity.amax() } else { 0.0 };
    for (i, row) in rows.iter().enumerate() {
        let slack = row.a.dot(&y) - row.b;
        match row.kind {
            RowKind::Equality => kkt_residual = kkt_residual.max(slack.abs()),
            _ => {
                kkt_residual = kkt_residual
                    .max((-slack).max(0.0))
                    .max((-mu[i]).max(0.0))
                    .max((mu[i] * slack).abs());
            }
        }
    }

    let affine_multiplier = rows
        .iter()
        .enumerate()
        .find(|(_, r)| r.kind == RowKind::Affine)
        .map_or(0.0, |(i, _)| mu[i]);
    let bound_multipliers = rows
        .iter()
        .enumerate()
        .filter(|(_, r)| r.kind != RowKind::Affine)
        .map(|(i, _)| mu[i])
        .collect();

    Ok(OracleSolution {
        xi,
        u1,
        u2,
        j1,
        j2,
        affine_multiplier,
        bound_multipliers,
        kkt_residual,
    })
}

// ======================================================================
// Comparison against the continuous solvers
// ======================================================================

/// Gap report between a continuous equilibrium and the discrete oracle.
///
/// Cost and multiplier gaps are relative (denominator `max(1, |oracle|)`
/// for the multiplier, `max(10⁻⁹, |oracle|)` for the costs); state and
/// control gaps are absolute sup-norms, reported for the caller to judge
/// against its own `O(Δt)` expectations.
#[derive(Debug, Clone, serde::Serialize)]
pub struct ComparisonReport {
    /// Relative leader-cost gap.
    pub j1_gap: f64,
    /// Relative follower-cost gap.
    pub j2_gap: f64,
    /// Sup-norm gap between `𝔼ξ̄` and the oracle's `ξ*`.
    pub xi_gap: f64,
    /// Sup-norm gap of the mean leader control at the left step nodes.
    pub u1_gap: f64,
    /// Sup-norm gap of the mean follower control at the left step nodes.
    pub u2_gap: f64,
    /// Relative gap between the continuous `λ` and the oracle's affine
    /// multiplier.
    pub multiplier_gap: f64,
    /// The tolerance the verdict was taken against.
    pub tolerance: f64,
    /// `true` when both cost gaps and the multiplier gap are within
    /// `tolerance`.
    pub within: bool,
}

/// Relative gap with a floor on the denominator so exact zeros compare as
/// equal instead of `0/0`.
fn relative_gap(value: f64, reference: f64, floor: f64) -> f64 {
    (value - reference).abs() / reference.abs().max(floor)
}

/// Measures a continuous equilibrium against the discrete oracle solution on
/// the same grid.
///
/// The comparison contracts: the continuous solution's paths must live on a
/// grid with exactly as many steps as the oracle carries control vectors,
/// and all dimensions must agree.  Controls are compared at the left node of
/// each step (the oracle's controls are step functions); stochastic
/// solutions are reduced to their scenario means first.
///
/// # Errors
///
/// `DimensionMismatch` if grids, state, or control dimensions disagree.
pub fn compare(
    continuous: &EquilibriumSolution,
    discrete: &OracleSolution,
    tolerance: f64,
) -> Result<ComparisonReport> {
    let steps = discrete.u1.len();
    if continuous.u1.grid.steps != steps || continuous.u2.grid.steps != steps {
        return Err(Error::DimensionMismatch {
            context: format!(
                "continuous paths have {} steps, oracle has {}",
                continuous.u1.grid.steps, steps
            ),
        });
    }
    let xi_mean = continuous.xi.mean();
    if xi_mean.len() != discrete.xi.len() {
        return Err(Error::DimensionMismatch {
            context: format!(
                "terminal controls have dimensions {} and {}",
                xi_mean.len(),
                discrete.xi.len()
            ),
        });
    }
    let m1 = discrete.u1.first().map_or(0, |v| v.len());
    let m2 = discrete.u2.first().map_or(0, |v| v.len());
    if continuous.u1.dim != m1 || continuous.u2.dim != m2 {
        return Err(Error::DimensionMismatch {
            context: format!(
                "control dimensions disagree: continuous ({}, {}), oracle ({m1}, {m2})",
                continuous.u1.dim, continuous.u2.dim
            ),
        });
    }

    let xi_gap = (&xi_mean - &discrete.xi).amax();
    let u1_mean = continuous.u1.mean_path();
    let u2_mean = continuous.u2.mean_path();
    let mut u1_gap = 0.0f64;
    let mut u2_gap = 0.0f64;
    for k in 0..steps {
        u1_gap = u1_gap.max((u1_mean.at(0, k) - &discrete.u1[k]).amax());
        u2_gap = u2_gap.max((u2_mean.at(0, k) - &discrete.u2[k]).amax());
    }

    let j1_gap = relative_gap(continuous.j1, discrete.j1, 1e-9);
    let j2_gap = relative_gap(continuous.j2, discrete.j2, 1e-9);
    let multiplier_gap = relative_gap(continuous.lambda, discrete.affine_multiplier, 1.0);
    let within = j1_gap <= tolerance && j2_gap <= tolerance && multiplier_gap <= tolerance;
    Ok(ComparisonReport {
        j1_gap,
        j2_gap,
        xi_gap,
        u1_gap,
        u2_gap,
        multiplier_gap,
        tolerance,
        within,
    })
}

/// Least-squares slope of `log(gap)` against `log(Δt)` for a refinement
/// table `(N, gap)`: a first-order scheme yields a slope near `1`, a
/// second-order scheme near `2`.
///
/// Entries with non-positive or non-finite gaps are dropped (their
/// logarithm is undefined); with fewer than two usable points the slope is
/// `NaN`.
pub fn convergence_slope(table: &[(usize, f64)]) -> f64 {
    let pts: Vec<(f64, f64)> = table
        .iter()
        .filter(|(n, g)| *n > 0 && *g > 0.0 && g.is_finite())
        .map(|(n, g)| ((1.0 / *n as f64).ln(), g.ln()))
        .collect();
    if pts.len() < 2 {
        return f64::NAN;
    }
    let len = pts.len() as f64;
    let (mx, my) = pts
        .iter()
        .fold((0.0, 0.0), |(sx, sy), (x, y)| (sx + x, sy + y));
    let (mx, my) = (mx / len, my / len);
    let (sxy, sxx) = pts.iter().fold((0.0, 0.0), |(sxy, sxx), (x, y)| {
        (sxy + (x - mx) * (y - my), sxx + (x - mx) * (x - mx))
    });
    sxy / sxx
}

// ======================================================================
// Tests
// ======================================================================
