//! Picard fixed-point solver and wellposedness certificates for coupled
//! forward–backward systems with mean-field terms.
//!
//! The solver treats systems of the shape
//!
//! ```text
//!     dY(s) = b(s, Y, X, Z, 𝔼Z) ds + σ(s, Y, X, Z) dW(s),   Y(0) = h(X(0)),
//!     dX(s) = f(s, Y, X, Z, 𝔼Z) ds + Z dW(s),               X(T) = g(Y(T), 𝔼Y(T)),
//! ```
//!
//! where `Y` is the forward component (dimension `n₁`), `(X, Z)` is the
//! adapted backward pair (dimension `n₂`), and `𝔼Z`, `𝔼Y(T)` are ensemble
//! means.  Both optimality systems of the game — the follower's Hamiltonian
//! system and the leader's stacked system — instantiate this shape, the
//! latter via [`leader_fixed_point_system`].
//!
//! [`picard_solve`] iterates the two half-steps of the contraction map:
//!
//! 1. given `(X, Z, X(0))`, simulate `Y` forward scenario-wise by
//!    Euler–Maruyama;
//! 2. given `Y`, solve the backward equation by a backward recursion whose
//!    conditional expectations are least-squares regressions on polynomial
//!    bases in the Brownian value `W(t_k)`,
//!
//! and measures the update in the discounted norm [`discounted_norm`], the
//! norm in which the contraction argument operates.  [`certify`] evaluates
//! the sufficient smallness conditions — monotonicity rates, Lipschitz
//! constants, discount margins, and the resulting contraction factor — and
//! reports every inequality with its margin.  Certificates are advisory for
//! [`picard_solve`]: a failed certificate does not prevent an attempt, it
//! only withdraws the convergence guarantee.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::constraints::{project, ConvexSet};
use crate::core::{discounted_trapezoid, MatrixPath, ScenarioEnsemble, TimeGrid, VectorPath};
use crate::follower::GameCoefficients;
use crate::{Error, Result};

// ======================================================================
// Tolerances and defaults
// ======================================================================

/// Default polynomial degree of the regression basis `{1, W, …, W^d}`.
pub const DEFAULT_REGRESSION_DEGREE: usize = 2;

/// A regression column whose standard deviation falls below this bound is
/// dropped (it carries no information); with every stochastic column gone
/// the regression degenerates to the plain ensemble mean, which is the
/// exact conditional expectation for a deterministic ensemble.
pub const ZERO_VARIANCE_TOL: f64 = 1e-12;

// ======================================================================
// Declared affine maps
// ======================================================================

/// A nodewise affine map `(Y, X, Z, 𝔼Z) ↦ Lʸ(t)Y + Lˣ(t)X + Lᶻ(t)Z + Lᵐ(t)𝔼Z + r(t)`.
///
/// Every coefficient of the fixed-point system is declared in this form so
/// that Lipschitz constants can be read off as operator norms of the stored
/// matrices.  The inhomogeneity `r` is a [`VectorPath`] because controls
/// entering the backward drift may differ per scenario; a single-scenario
/// path broadcasts across the ensemble.
#[derive(Debug, Clone)]
pub struct AffineMap {
    /// Coefficient of the forward state `Y` (output dim × n₁).
    pub on_y: MatrixPath,
    /// Coefficient of the backward state `X` (output dim × n₂).
    pub on_x: MatrixPath,
    /// Coefficient of the martingale integrand `Z` (output dim × n₂).
    pub on_z: MatrixPath,
    /// Coefficient of the ensemble mean `𝔼Z` (output dim × n₂).
    pub on_mean_z: MatrixPath,
    /// Inhomogeneity `r(t)`, possibly scenario-dependent; `None` is zero.
    pub offset: Option<VectorPath>,
}

impl AffineMap {
    /// The all-zero map with the given shape.
    pub fn zero(grid: &TimeGrid, out_dim: usize, n1: usize, n2: usize) -> Self {
        AffineMap {
            on_y: MatrixPath::constant(grid, DMatrix::zeros(out_dim, n1)),
            on_x: MatrixPath::constant(grid, DMatrix::zeros(out_dim, n2)),
            on_z: MatrixPath::constant(grid, DMatrix::zeros(out_dim, n2)),
            on_mean_z: MatrixPath::constant(grid, DMatrix::zeros(out_dim, n2)),
            offset: None,
        }
    }

    /// Output dimension of the map.
    pub fn out_dim(&self) -> usize {
        self.on_y.rows()
    }

    /// Checks that all coefficient blocks live on `grid` and have the
    /// declared shape.
    fn validate(&self, grid: &TimeGrid, out: usize, n1: usize, n2: usize, name: &str) -> Result<()> {
        let blocks = [
            (&self.on_y, n1, "forward-state"),
            (&self.on_x, n2, "backward-state"),
            (&self.on_z, n2, "martingale"),
            (&self.on_mean_z, n2, "mean-martingale"),
        ];
        for (path, cols, which) in blocks {
            if path.grid.len() != grid.len() {
                return Err(Error::DimensionMismatch {
                    context: format!(
                        "{name}: {which} coefficient has {} nodes, grid has {}",
                        path.grid.len(),
                        grid.len()
                    ),
                });
            }
            if path.rows() != out || path.cols() != cols {
                return Err(Error::DimensionMismatch {
                    context: format!(
                        "{name}: {which} coefficient is {}×{}, expected {out}×{cols}",
                        path.rows(),
                        path.cols()
                    ),
                });
            }
        }
        if let Some(r) = &self.offset {
            if r.dim != out || r.grid.len() != grid.len() {
                return Err(Error::DimensionMismatch {
                    context: format!(
                        "{name}: offset path is {}-dimensional on {} nodes, expected {out} on {}",
                        r.dim,
                        r.grid.len(),
                        grid.len()
                    ),
                });
            }
        }
        Ok(())
    }

    /// Evaluates the map at node `k`, scenario `m`, writing into `out`
    /// (which is overwritten).  All state arguments are component slices.
    fn eval_into(
        &self,
        k: usize,
        scenario: usize,
        y: &[f64],
        x: &[f64],
        z: &[f64],
        mean_z: &[f64],
        out: &mut [f64],
    ) {
        out.fill(0.0);
        mat_vec_acc(out, self.on_y.at(k), y);
        mat_vec_acc(out, self.on_x.at(k), x);
        mat_vec_acc(out, self.on_z.at(k), z);
        mat_vec_acc(out, self.on_mean_z.at(k), mean_z);
        if let Some(r) = &self.offset {
            let rv = r.node_broadcast(scenario, k);
            for (o, &ri) in out.iter_mut().zip(rv) {
                *o += ri;
            }
        }
    }
}

/// `acc += M·v` for a dense matrix and a component slice (column-major
/// inner loop; the solver's hot path at ensemble sizes of 10⁵ scenarios).
#[inline]
fn mat_vec_acc(acc: &mut [f64], m: &DMatrix<f64>, v: &[f64]) {
    debug_assert_eq!(m.ncols(), v.len());
    debug_assert_eq!(m.nrows(), acc.len());
    for (j, &vj) in v.iter().enumerate() {
        if vj != 0.0 {
            for i in 0..m.nrows() {
                acc[i] += m[(i, j)] * vj;
            }
        }
    }
}

/// The initial coupling `Y(0) = H·X(0) + h₀`.
#[derive(Debug, Clone)]
pub struct InitialMap {
    /// Linear part `H` (n₁ × n₂).
    pub linear: DMatrix<f64>,
    /// Constant part `h₀` (n₁).
    pub offset: DVector<f64>,
}

impl InitialMap {
    fn apply(&self, x0: &[f64], out: &mut [f64]) {
        out.copy_from_slice(self.offset.as_slice());
        mat_vec_acc(out, &self.linear, x0);
    }
}

/// A metric projection applied to the leading block of the terminal map's
/// affine image; the remaining components pass through unchanged.
///
/// Projections are non-expansive, so they contribute Lipschitz constant 1
/// to the certificates.
#[derive(Debug, Clone)]
pub struct ProjectedBlock {
    /// Number of leading components that are projected.
    pub dim: usize,
    /// The closed convex set projected onto.
    pub set: ConvexSet,
    /// The (symmetric positive definite) metric of the projection.
    pub metric: DMatrix<f64>,
}

/// The terminal coupling `X(T) = Π[ L·Y(T) + Lᵐ·𝔼Y(T) + g₀ ]`, where `Π`
/// optionally projects the leading block (see [`ProjectedBlock`]).
///
/// The constant part is a list of vectors: one entry is shared by all
/// scenarios, `M` entries supply one terminal value per scenario (the
/// follower's prescribed terminal state is scenario-dependent).
#[derive(Debug, Clone)]
pub struct TerminalMap {
    /// Linear part `L` applied to `Y(T)` (n₂ × n₁).
    pub linear: DMatrix<f64>,
    /// Linear part `Lᵐ` applied to the ensemble mean `𝔼Y(T)` (n₂ × n₁).
    pub mean_linear: DMatrix<f64>,
    /// Constant part `g₀`: length 1 (broadcast) or one entry per scenario.
    pub offset: Vec<DVector<f64>>,
    /// Optional projection of the leading block.
    pub projection: Option<ProjectedBlock>,
}

impl TerminalMap {
    /// Purely affine terminal data shared by all scenarios.
    pub fn affine(linear: DMatrix<f64>, mean_linear: DMatrix<f64>, offset: DVector<f64>) -> Self {
        TerminalMap {
            linear,
            mean_linear,
            offset: vec![offset],
            projection: None,
        }
    }

    fn offset_for(&self, scenario: usize) -> &DVector<f64> {
        if self.offset.len() == 1 {
            &self.offset[0]
        } else {
            &self.offset[scenario]
        }
    }

    /// Applies the map to one scenario's terminal forward state.
    fn apply(&self, y_t: &[f64], mean_y_t: &DVector<f64>, scenario: usize) -> Result<DVector<f64>> {
        let mut v = self.offset_for(scenario).clone();
        {
            let buf = v.as_mut_slice();
            mat_vec_acc(buf, &self.linear, y_t);
            mat_vec_acc(buf, &self.mean_linear, mean_y_t.as_slice());
        }
        if let Some(block) = &self.projection {
            let head = DVector::from_column_slice(&v.as_slice()[..block.dim]);
            let projected = project(&block.set, &head, &block.metric)?;
            v.as_mut_slice()[..block.dim].copy_from_slice(projected.as_slice());
        }
        Ok(v)
    }
}

// ======================================================================
// The system
// ======================================================================

/// A coupled forward–backward system in declared affine form.
///
/// See the module docs for the equation shape.  All maps are
/// [`AffineMap`]s, evaluable nodewise, with Lipschitz constants extractable
/// as operator norms ([`H5Constants::from_system`]); the terminal map may
/// compose a metric projection, which contributes constant 1.
#[derive(Debug, Clone)]
pub struct BfsdeSystem {
    /// Dimension of the forward component `Y`.
    pub n1: usize,
    /// Dimension of the backward pair `(X, Z)`.
    pub n2: usize,
    /// Forward drift `b(s, Y, X, Z, 𝔼Z)` (n₁-valued).
    pub drift: AffineMap,
    /// Forward diffusion `σ(s, Y, X, Z)` (n₁-valued; its `𝔼Z` block must vanish).
    pub diffusion: AffineMap,
    /// Backward driver `f(s, Y, X, Z, 𝔼Z)` (n₂-valued).
    pub driver: AffineMap,
    /// Initial coupling `Y(0) = h(X(0))`.
    pub initial: InitialMap,
    /// Terminal coupling `X(T) = g(Y(T), 𝔼Y(T))`.
    pub terminal: TerminalMap,
}

impl BfsdeSystem {
    /// A fully decoupled zero system (useful as a construction skeleton).
    pub fn zero(grid: &TimeGrid, n1: usize, n2: usize) -> Self {
        BfsdeSystem {
            n1,
            n2,
            drift: AffineMap::zero(grid, n1, n1, n2),
            diffusion: AffineMap::zero(grid, n1, n1, n2),
            driver: AffineMap::zero(grid, n2, n1, n2),
            initial: InitialMap {
                linear: DMatrix::zeros(n1, n2),
                offset: DVector::zeros(n1),
            },
            terminal: TerminalMap::affine(
                DMatrix::zeros(n2, n1),
                DMatrix::zeros(n2, n1),
                DVector::zeros(n2),
            ),
        }
    }

    /// Checks all declared shapes against the grid.
    ///
    /// # Errors
    ///
    /// `DimensionMismatch` for any shape disagreement; `InvalidArgument` if
    /// the diffusion depends on `𝔼Z` (the equation shape has no such term)
    /// or a projected block is inconsistent.
    pub fn validate(&self, grid: &TimeGrid) -> Result<()> {
        if self.n1 == 0 || self.n2 == 0 {
            return Err(Error::invalid("system", "state dimensions must be at least 1"));
        }
        self.drift.validate(grid, self.n1, self.n1, self.n2, "drift")?;
        self.diffusion
            .validate(grid, self.n1, self.n1, self.n2, "diffusion")?;
        self.driver.validate(grid, self.n2, self.n1, self.n2, "driver")?;
        if self.diffusion.on_mean_z.max_abs() != 0.0 {
            return Err(Error::invalid(
                "diffusion",
                "the forward diffusion takes no ensemble-mean argument; its 𝔼Z block must be zero",
            ));
        }
        if self.initial.linear.nrows() != self.n1
            || self.initial.linear.ncols() != self.n2
            || self.initial.offset.len() != self.n1
        {
            return Err(Error::DimensionMismatch {
                context: format!(
                    "initial map is {}×{} with offset length {}, expected {}×{} and {}",
                    self.initial.linear.nrows(),
                    self.initial.linear.ncols(),
                    self.initial.offset.len(),
                    self.n1,
                    self.n2,
                    self.n1
                ),
            });
        }
        let t = &self.terminal;
        if t.linear.nrows() != self.n2
            || t.linear.ncols() != self.n1
            || t.mean_linear.nrows() != self.n2
            || t.mean_linear.ncols() != self.n1
        {
            return Err(Error::DimensionMismatch {
                context: format!(
                    "terminal map blocks are {}×{} and {}×{}, expected {}×{}",
                    t.linear.nrows(),
                    t.linear.ncols(),
                    t.mean_linear.nrows(),
                    t.mean_linear.ncols(),
                    self.n2,
                    self.n1
                ),
            });
        }
        if t.offset.is_empty() || t.offset.iter().any(|v| v.len() != self.n2) {
            return Err(Error::DimensionMismatch {
                context: format!("terminal offsets must be nonempty {}-vectors", self.n2),
            });
        }
        if let Some(block) = &t.projection {
            if block.dim > self.n2 || block.set.dim() != block.dim {
                return Err(Error::invalid(
                    "terminal",
                    format!(
                        "projected block of dimension {} does not fit the {}-dimensional terminal state",
                        block.dim, self.n2
                    ),
                ));
            }
            if block.metric.nrows() != block.dim || block.metric.ncols() != block.dim {
                return Err(Error::DimensionMismatch {
                    context: format!(
                        "projection metric is {}×{}, expected {}×{}",
                        block.metric.nrows(),
                        block.metric.ncols(),
                        block.dim,
                        block.dim
                    ),
                });
            }
        }
        Ok(())
    }
}

/// Stacks four conformal blocks into `[[tl, tr], [bl, br]]`.
pub(crate) fn stack2x2(
    tl: &DMatrix<f64>,
    tr: &DMatrix<f64>,
    bl: &DMatrix<f64>,
    br: &DMatrix<f64>,
) -> DMatrix<f64> {
    let (r1, c1) = (tl.nrows(), tl.ncols());
    let (r2, c2) = (br.nrows(), br.ncols());
    debug_assert_eq!(tr.nrows(), r1);
    debug_assert_eq!(tr.ncols(), c2);
    debug_assert_eq!(bl.nrows(), r2);
    debug_assert_eq!(bl.ncols(), c1);
    let mut out = DMatrix::zeros(r1 + r2, c1 + c2);
    out.view_mut((0, 0), (r1, c1)).copy_from(tl);
    out.view_mut((0, c1), (r1, c2)).copy_from(tr);
    out.view_mut((r1, 0), (r2, c1)).copy_from(bl);
    out.view_mut((r1, c1), (r2, c2)).copy_from(br);
    out
}

/// Assembles the leader's coupled optimality system as a [`BfsdeSystem`].
///
/// The forward component stacks the leader costate with the follower
/// costate, `Y = (g; Ȳ)`; the backward component stacks the state with the
/// sensitivity process, `X = (X̄; h)`:
///
/// ```text
///     dY = −( diag(Aᵀ, Aᵀ) Y − [Q₁ Q₂; Q₂ 0] X ) ds
///          −( diag(Cᵀ, Cᵀ) Y − [S₁ S₂; S₂ 0] Z ) dW,
///     dX =  ( [K₁ K₂; K₂ 0] Y + diag(A, A) X + diag(C, C) Z ) ds + Z dW,
///     Y(0) = [H₁ H₂; H₂ 0] X(0),
///     X(T) = ( Proj_K[ G₁⁻¹(−g(T) + τ) ]; 0 ),
/// ```
///
/// with `K₁ = B₁R₁₁⁻¹B₁ᵀ`, `K₂ = B₂R₂₂⁻¹B₂ᵀ`, the projection taken in the
/// `G₁` metric, and `τ` the optional terminal tilt (the product λα of the
/// mean-constraint multiplier branch; `None` gives the homogeneous system,
/// whose exact solution is zero when `0 ∈ K`).
///
/// # Errors
///
/// `InvalidArgument` if `G₁` is not positive definite, a control weight is
/// singular, or the constraint set's dimension disagrees with the state's.
pub fn leader_fixed_point_system(
    coeffs: &GameCoefficients,
    k_set: &ConvexSet,
    terminal_tilt: Option<&DVector<f64>>,
    grid: &TimeGrid,
) -> Result<BfsdeSystem> {
    coeffs.validate()?;
    let n = coeffs.n;
    if k_set.dim() != n {
        return Err(Error::invalid(
            "k_set",
            format!("constraint set has dimension {}, state has {}", k_set.dim(), n),
        ));
    }
    let g1_inv = coeffs
        .g1
        .clone()
        .cholesky()
        .ok_or_else(|| Error::invalid("g1", "terminal weight must be positive definite"))?
        .inverse();

    let zero_n = DMatrix::<f64>::zeros(n, n);
    let k1 = coeffs.leader_kernel_path()?;
    let k2 = coeffs.follower_kernel_path()?;

    let nodes = grid.len();
    let mut on_y_drift = Vec::with_capacity(nodes);
    let mut on_x_drift = Vec::with_capacity(nodes);
    let mut on_y_diff = Vec::with_capacity(nodes);
    let mut on_z_diff = Vec::with_capacity(nodes);
    let mut on_y_drv = Vec::with_capacity(nodes);
    let mut on_x_drv = Vec::with_capacity(nodes);
    let mut on_z_drv = Vec::with_capacity(nodes);
    for k in 0..nodes {
        let at = coeffs.a.at(k).transpose();
        let ct = coeffs.c.at(k).transpose();
        on_y_drift.push(stack2x2(&(-&at), &zero_n, &zero_n, &(-&at)));
        on_x_drift.push(stack2x2(coeffs.q1.at(k), coeffs.q2.at(k), coeffs.q2.at(k), &zero_n));
        on_y_diff.push(stack2x2(&(-&ct), &zero_n, &zero_n, &(-&ct)));
        on_z_diff.push(stack2x2(coeffs.s1.at(k), coeffs.s2.at(k), coeffs.s2.at(k), &zero_n));
        on_y_drv.push(stack2x2(k1.at(k), k2.at(k), k2.at(k), &zero_n));
        on_x_drv.push(stack2x2(coeffs.a.at(k), &zero_n, &zero_n, coeffs.a.at(k)));
        on_z_drv.push(stack2x2(coeffs.c.at(k), &zero_n, &zero_n, coeffs.c.at(k)));
    }
    let path = |values: Vec<DMatrix<f64>>| MatrixPath {
        grid: grid.clone(),
        values,
    };

    let two_n = 2 * n;
    let mut drift = AffineMap::zero(grid, two_n, two_n, two_n);
    drift.on_y = path(on_y_drift);
    drift.on_x = path(on_x_drift);
    let mut diffusion = AffineMap::zero(grid, two_n, two_n, two_n);
    diffusion.on_y = path(on_y_diff);
    diffusion.on_z = path(on_z_diff);
    let mut driver = AffineMap::zero(grid, two_n, two_n, two_n);
    driver.on_y = path(on_y_drv);
    driver.on_x = path(on_x_drv);
    driver.on_z = path(on_z_drv);

    let initial = InitialMap {
        linear: stack2x2(&coeffs.h1, &coeffs.h2, &coeffs.h2, &zero_n),
        offset: DVector::zeros(two_n),
    };

    let mut terminal_offset = DVector::zeros(two_n);
    if let Some(tilt) = terminal_tilt {
        if tilt.len() != n {
            return Err(Error::DimensionMismatch {
                context: format!("terminal tilt has length {}, state dimension is {n}", tilt.len()),
            });
        }
        let head = &g1_inv * tilt;
        terminal_offset.rows_mut(0, n).copy_from(&head);
    }
    let terminal = TerminalMap {
        linear: stack2x2(&(-&g1_inv), &zero_n, &zero_n, &zero_n),
        mean_linear: DMatrix::zeros(two_n, two_n),
        offset: vec![terminal_offset],
        projection: Some(ProjectedBlock {
            dim: n,
            set: k_set.clone(),
            metric: coeffs.g1.clone(),
        }),
    };

    let system = BfsdeSystem {
        n1: two_n,
        n2: two_n,
        drift,
        diffusion,
        driver,
        initial,
        terminal,
    };
    system.validate(grid)?;
    Ok(system)
}

// ======================================================================
// The discounted norm
// ======================================================================

/// The discounted norm `‖(X, Z, X₀)‖_ρ` of the contraction argument:
///
/// ```text
///     ‖(X, Z, X₀)‖_ρ² = 𝔼 ∫₀ᵀ e^{−ρt} |X(t)|² dt
///                     + 𝔼 ∫₀ᵀ e^{−ρt} |Z(t)|² dt + 𝔼 |X₀|².
/// ```
///
/// `X₀` is an **independent** third slot, not the initial value of `X`:
/// pass `Some(v)` to supply it explicitly (deterministic), or `None` to use
/// the ensemble of initial values `X(0)` carried by `x` — the convention the
/// solver uses when measuring updates of `(X, Z, X(0))`.
///
/// The time integrals weight each cell's linear interpolant with the exact
/// exponential, so constant paths reproduce `∫ e^{−ρt} dt` to roundoff.
///
/// # Panics
///
/// If `x` and `z` disagree on grid or scenario count.
pub fn discounted_norm(x: &VectorPath, z: &VectorPath, x0: Option<&DVector<f64>>, rho: f64) -> f64 {
    assert_eq!(
        x.grid.len(),
        z.grid.len(),
        "X and Z must share a grid: {} vs {} nodes",
        x.grid.len(),
        z.grid.len()
    );
    assert_eq!(
        x.scenarios, z.scenarios,
        "X and Z must share the ensemble: {} vs {} scenarios",
        x.scenarios, z.scenarios
    );
    let nodes = x.grid.len();
    let dt = x.grid.dt();
    let mm = x.scenarios;
    let mut acc = 0.0;
    let mut samples_x = vec![0.0; nodes];
    let mut samples_z = vec![0.0; nodes];
    for m in 0..mm {
        for k in 0..nodes {
            samples_x[k] = x.node(m, k).iter().map(|v| v * v).sum();
            samples_z[k] = z.node(m, k).iter().map(|v| v * v).sum();
        }
        acc += discounted_trapezoid(&samples_x, dt, rho);
        acc += discounted_trapezoid(&samples_z, dt, rho);
    }
    acc /= mm as f64;
    match x0 {
        Some(v) => acc += v.norm_squared(),
        None => {
            let mut head = 0.0;
            for m in 0..mm {
                head += x.node(m, 0).iter().map(|v| v * v).sum::<f64>();
            }
            acc += head / mm as f64;
        }
    }
    acc.sqrt()
}

// ======================================================================
// Picard iteration
// ======================================================================

/// Convergence record of one [`picard_solve`] run.
#[derive(Debug, Clone, Serialize)]
pub struct PicardTrace {
    /// Discounted norms `‖Δ(X, Z, X(0))‖_ρ` of the successive updates.
    pub norms: Vec<f64>,
    /// Iterations performed.
    pub iterations: usize,
    /// `true` iff the last update norm fell below the tolerance.
    pub converged: bool,
    /// Largest observed ratio of successive update norms from the second
    /// update onward — the empirical contraction rate (0 when fewer than
    /// two ratios are observable).
    pub ratio_estimate: f64,
    /// Discount rate the updates were measured in.
    pub rho: f64,
}

/// Output of [`picard_solve`]: the fixed-point paths and the trace.
#[derive(Debug, Clone)]
pub struct BfsdeSolution {
    /// Forward component, one path per scenario.
    pub y: VectorPath,
    /// Backward component.
    pub x: VectorPath,
    /// Martingale integrand of the backward component.  Its terminal node
    /// repeats the last regression value (the recursion defines `Z` on
    /// `[t₀, t_{N−1}]`); quadrature is the only consumer of that node.
    pub z: VectorPath,
    /// Nodewise ensemble mean of `z` — the mean-field term of the final
    /// sweep, stored so callers read exactly what the solver used.
    pub mean_z: VectorPath,
    /// Convergence record.
    pub trace: PicardTrace,
}

/// One forward/backward sweep of the fixed-point map.
struct SweepOutput {
    y: VectorPath,
    x: VectorPath,
    z: VectorPath,
}

/// Per-node regression machinery for conditional expectations: least
/// squares on the polynomial basis `{1, W̃, …, W̃^d}` in the standardized
/// Brownian value at the node.
///
/// Also used by the cost evaluator for stochastic terminal data.
pub(crate) struct NodeRegression {
    /// Design-matrix columns, length-M each; the first is constant 1.
    columns: Vec<Vec<f64>>,
    /// Cholesky factor of the (small) normal matrix ΦᵀΦ; `None` when only
    /// the constant column survives and the fit is the plain mean.
    normal: Option<nalgebra::Cholesky<f64, nalgebra::Dyn>>,
}

impl NodeRegression {
    /// Builds the basis from the scenarios' Brownian values `w` at one node.
    ///
    /// Columns with standard deviation below [`ZERO_VARIANCE_TOL`] are
    /// dropped; with all stochastic columns gone the fit degenerates to the
    /// plain ensemble mean (exact for deterministic ensembles, and the only
    /// correct choice at the initial node where `W(t₀) = 0`).
    ///
    /// # Errors
    ///
    /// `IllConditionedRegression` if the normal matrix of the retained
    /// columns is not positive definite.
    pub(crate) fn build(w: &[f64], degree: usize, node: usize) -> Result<Self> {
        let mm = w.len();
        let mean = w.iter().sum::<f64>() / mm as f64;
        let var = w.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / mm as f64;
        let std = var.sqrt();

        let mut columns: Vec<Vec<f64>> = vec![vec![1.0; mm]];
        if std >= ZERO_VARIANCE_TOL {
            let scaled: Vec<f64> = w.iter().map(|&v| (v - mean) / std).collect();
            for d in 1..=degree {
                columns.push(scaled.iter().map(|&v| v.powi(d as i32)).collect());
            }
        }
        if columns.len() == 1 {
            return Ok(NodeRegression {
                columns,
                normal: None,
            });
        }
        let p = columns.len();
        let mut gram = DMatrix::zeros(p, p);
        for i in 0..p {
            for j in i..p {
                let dot: f64 = columns[i].iter().zip(&columns[j]).map(|(a, b)| a * b).sum();
                gram[(i, j)] = dot;
                gram[(j, i)] = dot;
            }
        }
        let normal = gram
            .cholesky()
            .ok_or(Error::IllConditionedRegression { node })?;
        Ok(NodeRegression {
            columns,
            normal: Some(normal),
        })
    }

    /// Fitted values of the regression of `target` on the basis — the
    /// least-squares estimate of `𝔼[target | W(t_k)]` per scenario.
    pub(crate) fn fit(&self, target: &[f64]) -> Vec<f64> {
        let Some(normal) = &self.normal else {
            let mean = target.iter().sum::<f64>() / target.len() as f64;
            return vec![mean; target.len()];
        };
        let p = self.columns.len();
        let mut rhs = DVector::zeros(p);
        for (j, col) in self.columns.iter().enumerate() {
            rhs[j] = col.iter().zip(target).map(|(a, b)| a * b).sum();
        }
        let beta = normal.solve(&rhs);
        let mut fitted = vec![0.0; target.len()];
        for (j, col) in self.columns.iter().enumerate() {
            let bj = beta[j];
            for (f, &c) in fitted.iter_mut().zip(col) {
                *f += bj * c;
            }
        }
        fitted
    }
}

/// Runs one sweep: forward Euler–Maruyama for `Y` given `(X, Z, 𝔼Z)`, then
/// the backward regression recursion for `(X, Z)` given `Y`.
#[allow(clippy::too_many_arguments)]
fn picard_sweep(
    system: &BfsdeSystem,
    grid: &TimeGrid,
    ensemble: &ScenarioEnsemble,
    w: &[f64],
    degree: usize,
    implicit_inv: &[DMatrix<f64>],
    x_prev: &VectorPath,
    z_prev: &VectorPath,
) -> Result<SweepOutput> {
    let nn = grid.steps;
    let mm = ensemble.paths;
    let dt = grid.dt();
    let (n1, n2) = (system.n1, system.n2);

    // ---- mean-field input of the forward pass: 𝔼Z of the previous iterate.
    let mean_z_prev: Vec<DVector<f64>> = (0..=nn).map(|k| z_prev.mean_at(k)).collect();

    // ---- forward pass.
    let mut y = VectorPath::zeros(grid, mm, n1);
    let mut yk = vec![0.0; n1];
    let mut bbuf = vec![0.0; n1];
    let mut sbuf = vec![0.0; n1];
    for m in 0..mm {
        system.initial.apply(x_prev.node(m, 0), &mut yk);
        y.set_node(m, 0, &yk);
        for k in 0..nn {
            let xk = x_prev.node(m, k);
            let zk = z_prev.node(m, k);
            let mzk = mean_z_prev[k].as_slice();
            system.drift.eval_into(k, m, &yk, xk, zk, mzk, &mut bbuf);
            system.diffusion.eval_into(k, m, &yk, xk, zk, mzk, &mut sbuf);
            let dw = ensemble.increment(m, k);
            for i in 0..n1 {
                yk[i] += dt * bbuf[i] + dw * sbuf[i];
            }
            y.set_node(m, k + 1, &yk);
        }
    }

    // ---- terminal coupling, with the ensemble mean of Y(T).
    let mean_y_t = y.mean_at(nn);
    let mut x = VectorPath::zeros(grid, mm, n2);
    let mut z = VectorPath::zeros(grid, mm, n2);
    for m in 0..mm {
        let xt = system.terminal.apply(y.node(m, nn), &mean_y_t, m)?;
        x.set_node(m, nn, xt.as_slice());
    }

    // ---- backward recursion with regression conditional expectations.
    let mut wk = vec![0.0; mm];
    let mut target = vec![0.0; mm];
    let mut ex = vec![vec![0.0; mm]; n2]; // 𝔼_k[X_{k+1}] per component
    let mut rhsbuf = vec![0.0; n2];
    let mut fbuf = vec![0.0; n2];
    for k in (0..nn).rev() {
        for m in 0..mm {
            wk[m] = w[m * (nn + 1) + k];
        }
        let regression = NodeRegression::build(&wk, degree, k)?;

        // Z_k = 𝔼_k[X_{k+1} ΔW_k] / Δt, then the within-sweep mean 𝔼Z_k.
        for i in 0..n2 {
            for m in 0..mm {
                target[m] = x.node(m, k + 1)[i] * ensemble.increment(m, k);
            }
            let fitted = regression.fit(&target);
            for m in 0..mm {
                z.node_mut(m, k)[i] = fitted[m] / dt;
            }
        }
        let mean_z_k = z.mean_at(k);

        // 𝔼_k[X_{k+1}] per component.
        for i in 0..n2 {
            for m in 0..mm {
                target[m] = x.node(m, k + 1)[i];
            }
            let fitted = regression.fit(&target);
            ex[i].copy_from_slice(&fitted);
        }

        // Implicit step: (I + Δt·∂f/∂X) X_k = 𝔼_k[X_{k+1}] − Δt·f_rest.
        for m in 0..mm {
            let yk_m = y.node(m, k);
            let zk_m = z.node(m, k);
            fbuf.fill(0.0);
            mat_vec_acc(&mut fbuf, system.driver.on_y.at(k), yk_m);
            mat_vec_acc(&mut fbuf, system.driver.on_z.at(k), zk_m);
            mat_vec_acc(&mut fbuf, system.driver.on_mean_z.at(k), mean_z_k.as_slice());
            if let Some(r) = &system.driver.offset {
                let rv = r.node_broadcast(m, k);
                for i in 0..n2 {
                    fbuf[i] += rv[i];
                }
            }
            for i in 0..n2 {
                rhsbuf[i] = ex[i][m] - dt * fbuf[i];
            }
            let xk = x.node_mut(m, k);
            xk.fill(0.0);
            mat_vec_acc(xk, &implicit_inv[k], &rhsbuf);
        }
    }

    // The recursion defines Z on [t₀, t_{N−1}]; pad the terminal node with
    // the last value so quadrature sees a full path.
    for m in 0..mm {
        let last = z.at(m, nn.saturating_sub(1));
        z.set_node(m, nn, last.as_slice());
    }

    Ok(SweepOutput { y, x, z })
}

/// First grid time at which a path carries a non-finite value.
fn first_nonfinite_time(path: &VectorPath) -> Option<f64> {
    let nodes = path.grid.len();
    let dim = path.dim;
    path.raw()
        .iter()
        .position(|v| !v.is_finite())
        .map(|idx| path.grid.nodes[(idx / dim) % nodes])
}

/// Solves a coupled forward–backward system by Picard iteration.
///
/// Starting from the zero iterate, each pass simulates `Y` forward by
/// Euler–Maruyama given `(X, Z, X(0))`, then rebuilds `(X, Z)` by the
/// backward recursion
///
/// ```text
///     Z_k = 𝔼_k[ X_{k+1} ΔW_k ] / Δt,
///     (I + Δt ∂f/∂X) X_k = 𝔼_k[X_{k+1}] − Δt·( f − ∂f/∂X·X )(t_k),
/// ```
///
/// with `𝔼_k[·]` the least-squares regression on `{1, W(t_k), …, W(t_k)^d}`
/// ([`NodeRegression`]), and stops when the update of `(X, Z, X(0))`
/// measured by [`discounted_norm`] falls below `tol`.  Mean-field terms are
/// ensemble means refreshed each sweep: `𝔼Z` enters the forward pass from
/// the previous iterate and the backward pass from the values just
/// regressed; `𝔼Y(T)` is taken from the freshly simulated forward paths.
///
/// `rho` is the discount of the update norm; `None` selects the rate the
/// certificate machinery picks for the system's extracted constants (the
/// one-dimensional margin-maximizing search of [`certify`]).  Certificates
/// are advisory here — a failed certificate does not prevent the attempt.
///
/// # Errors
///
/// * `NoConvergence` (with the full update history) if `max_iter` sweeps
///   do not reach `tol`;
/// * `IllConditionedRegression` if a node's regression basis degenerates;
/// * `NumericalBlowup` if an iterate leaves the finite range;
/// * `DimensionMismatch`/`InvalidArgument` for inconsistent inputs.
#[allow(clippy::too_many_arguments)]
pub fn picard_solve(
    system: &BfsdeSystem,
    grid: &TimeGrid,
    ensemble: &ScenarioEnsemble,
    rho: Option<f64>,
    tol: f64,
    max_iter: usize,
    degree: usize,
) -> Result<BfsdeSolution> {
    system.validate(grid)?;
    if ensemble.grid.steps != grid.steps || (ensemble.grid.horizon - grid.horizon).abs() > 1e-12 {
        return Err(Error::DimensionMismatch {
            context: format!(
                "ensemble grid ({} steps, T = {}) differs from solver grid ({} steps, T = {})",
                ensemble.grid.steps, ensemble.grid.horizon, grid.steps, grid.horizon
            ),
        });
    }
    if !(tol > 0.0) {
        return Err(Error::invalid("tol", format!("must be positive, got {tol}")));
    }
    if max_iter == 0 {
        return Err(Error::invalid("max_iter", "must be at least 1"));
    }
    for path in [&system.drift.offset, &system.diffusion.offset, &system.driver.offset]
        .into_iter()
        .flatten()
    {
        if path.scenarios != 1 && path.scenarios != ensemble.paths {
            return Err(Error::DimensionMismatch {
                context: format!(
                    "offset path has {} scenarios, ensemble has {}",
                    path.scenarios, ensemble.paths
                ),
            });
        }
    }
    if system.terminal.offset.len() != 1 && system.terminal.offset.len() != ensemble.paths {
        return Err(Error::DimensionMismatch {
            context: format!(
                "terminal offset has {} entries, ensemble has {} scenarios",
                system.terminal.offset.len(),
                ensemble.paths
            ),
        });
    }

    let rho_used = rho.unwrap_or_else(|| {
        let h5 = H5Constants::from_system(system);
        select_discount(&h5, auto_epsilon(&h5))
    });
    let mm = ensemble.paths;
    let nn = grid.steps;
    let dt = grid.dt();
    let w = ensemble.brownian_flat();

    // Implicit-step inverses (I + Δt ∂f/∂X)⁻¹, one per node.
    let mut implicit_inv = Vec::with_capacity(nn);
    let eye = DMatrix::<f64>::identity(system.n2, system.n2);
    for k in 0..nn {
        let m = &eye + system.driver.on_x.at(k) * dt;
        let inv = m.try_inverse().ok_or_else(|| Error::NumericalBlowup {
            time: grid.nodes[k],
            context: "implicit backward step matrix I + Δt·∂f/∂X is singular".into(),
        })?;
        implicit_inv.push(inv);
    }

    let mut x = VectorPath::zeros(grid, mm, system.n2);
    let mut z = VectorPath::zeros(grid, mm, system.n2);
    let mut y = VectorPath::zeros(grid, mm, system.n1);
    let mut norms = Vec::new();
    let mut converged = false;
    let mut iterations = 0;

    for _ in 0..max_iter {
        iterations += 1;
        let sweep = picard_sweep(system, grid, ensemble, &w, degree, &implicit_inv, &x, &z)?;
        for (path, label) in [(&sweep.y, "forward"), (&sweep.x, "backward"), (&sweep.z, "martingale")]
        {
            if let Some(t) = first_nonfinite_time(path) {
                return Err(Error::NumericalBlowup {
                    time: t,
                    context: format!("{label} component left the finite range on sweep {iterations}"),
                });
            }
        }

        // Update norm of (X, Z, X(0)) — difference paths share the grid.
        let mut dx = sweep.x.clone();
        for (d, p) in dx.raw_mut().iter_mut().zip(x.raw()) {
            *d -= p;
        }
        let mut dz = sweep.z.clone();
        for (d, p) in dz.raw_mut().iter_mut().zip(z.raw()) {
            *d -= p;
        }
        let delta = discounted_norm(&dx, &dz, None, rho_used);
        norms.push(delta);

        x = sweep.x;
        z = sweep.z;
        y = sweep.y;
        if delta < tol {
            converged = true;
            break;
        }
    }

    if !converged {
        return Err(Error::NoConvergence {
            iterations,
            last_delta: norms.last().copied().unwrap_or(f64::NAN),
            history: norms,
        });
    }

    let mut ratio = 0.0f64;
    for i in 2..norms.len() {
        if norms[i - 1] > 0.0 {
            ratio = ratio.max(norms[i] / norms[i - 1]);
        }
    }

    let mean_z = z.mean_path();
    Ok(BfsdeSolution {
        y,
        x,
        z,
        mean_z,
        trace: PicardTrace {
            norms,
            iterations,
            converged,
            ratio_estimate: ratio,
            rho: rho_used,
        },
    })
}

// ======================================================================
// Wellposedness certificates
// ======================================================================

/// Monotonicity rates and Lipschitz constants of a coupled system.
///
/// `k[i]` stores the constant `k_{i+1}` of the standing Lipschitz
/// hypotheses (the array is 0-indexed, the constants are conventionally
/// numbered from 1):
///
/// ```text
///     k₁, k₂, k₃ : drift b in X, Z, 𝔼Z          k₇, k₈, k₉ : diffusion σ in Y, X, Z
///     k₄, k₅, k₆ : driver f in Y, Z, 𝔼Z          k₁₀        : initial map in X(0)
///     k₁₁, k₁₂   : terminal map in Y(T), 𝔼Y(T)
/// ```
///
/// `rho1` is the monotonicity rate of `b` in `Y` (forward orientation) and
/// `rho2` that of `f` in `X` in the time-reversed orientation — the
/// orientation in which the backward equation is integrated, so that both
/// rates are negative exactly when the respective flow is dissipative in
/// the direction it is solved.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct H5Constants {
    /// Monotonicity rate of the forward drift in `Y`.
    pub rho1: f64,
    /// Monotonicity rate of the backward driver in `X` (time-reversed).
    pub rho2: f64,
    /// Lipschitz constants `k₁ … k₁₂` (see the type docs for the indexing).
    pub k: [f64; 12],
}

/// Largest eigenvalue of `sign · ½(M + Mᵀ)`, sup over nodes.
fn sup_max_sym_eig(path: &MatrixPath, sign: f64) -> f64 {
    path.values
        .iter()
        .map(|m| {
            let s = (m + m.transpose()) * (0.5 * sign);
            s.symmetric_eigenvalues()
                .iter()
                .fold(f64::NEG_INFINITY, |a, &v| a.max(v))
        })
        .fold(f64::NEG_INFINITY, f64::max)
}

impl H5Constants {
    /// Reads the constants off a declared system: operator norms of the
    /// affine blocks, monotonicity rates from symmetric parts (projections
    /// in the terminal map are non-expansive and contribute factor 1).
    pub fn from_system(system: &BfsdeSystem) -> Self {
        use crate::core::spectral_norm;
        H5Constants {
            rho1: sup_max_sym_eig(&system.drift.on_y, 1.0),
            rho2: sup_max_sym_eig(&system.driver.on_x, -1.0),
            k: [
                system.drift.on_x.sup_opnorm(),
                system.drift.on_z.sup_opnorm(),
                system.drift.on_mean_z.sup_opnorm(),
                system.driver.on_y.sup_opnorm(),
                system.driver.on_z.sup_opnorm(),
                system.driver.on_mean_z.sup_opnorm(),
                system.diffusion.on_y.sup_opnorm(),
                system.diffusion.on_x.sup_opnorm(),
                system.diffusion.on_z.sup_opnorm(),
                spectral_norm(&system.initial.linear),
                spectral_norm(&system.terminal.linear),
                spectral_norm(&system.terminal.mean_linear),
            ],
        }
    }

    /// Constants of the leader's stacked optimality system, matching the
    /// crude block bounds of the sufficient criterion: the cross-coupling
    /// norms are taken on the composed 2×2 block matrices, the diffusion
    /// feedback with factors √2 and 2 on `sup‖C‖`.
    ///
    /// # Errors
    ///
    /// `InvalidArgument` if a control weight or `G₁` is singular.
    pub fn stacked_leader(coeffs: &GameCoefficients) -> Result<Self> {
        coeffs.validate()?;
        let n = coeffs.n;
        let zero_n = DMatrix::<f64>::zeros(n, n);
        let k1p = coeffs.leader_kernel_path()?;
        let k2p = coeffs.follower_kernel_path()?;
        let grid = coeffs.grid().clone();
        let composed = |a: &MatrixPath, b: &MatrixPath| -> MatrixPath {
            let values = (0..grid.len())
                .map(|k| stack2x2(a.at(k), b.at(k), b.at(k), &zero_n))
                .collect();
            MatrixPath {
                grid: grid.clone(),
                values,
            }
        };
        let rho_star = sup_max_sym_eig(&coeffs.a, -1.0);
        let c_norm = coeffs.c.sup_opnorm();
        let g1_inv = coeffs
            .g1
            .clone()
            .cholesky()
            .ok_or_else(|| Error::invalid("g1", "terminal weight must be positive definite"))?
            .inverse();
        let initial = stack2x2(&coeffs.h1, &coeffs.h2, &coeffs.h2, &zero_n);
        Ok(H5Constants {
            rho1: rho_star,
            rho2: rho_star,
            k: [
                composed(&coeffs.q1, &coeffs.q2).sup_opnorm(),
                0.0,
                0.0,
                composed(&k1p, &k2p).sup_opnorm(),
                std::f64::consts::SQRT_2 * c_norm,
                0.0,
                2.0 * c_norm,
                0.0,
                std::f64::consts::SQRT_2 * composed(&coeffs.s1, &coeffs.s2).sup_opnorm(),
                crate::core::spectral_norm(&initial),
                crate::core::spectral_norm(&g1_inv),
                0.0,
            ],
        })
    }

    /// Constants of the follower's Hamiltonian system (forward costate,
    /// backward state pinned to a prescribed terminal value, so the
    /// terminal coupling constants vanish).
    ///
    /// # Errors
    ///
    /// `InvalidArgument` if the follower control weight is singular.
    pub fn follower_hamiltonian(coeffs: &GameCoefficients) -> Result<Self> {
        coeffs.validate()?;
        let rho_star = sup_max_sym_eig(&coeffs.a, -1.0);
        let c_norm = coeffs.c.sup_opnorm();
        Ok(H5Constants {
            rho1: rho_star,
            rho2: rho_star,
            k: [
                coeffs.q2.sup_opnorm(),
                0.0,
                0.0,
                coeffs.follower_kernel_path()?.sup_opnorm(),
                c_norm,
                0.0,
                std::f64::consts::SQRT_2 * c_norm,
                0.0,
                std::f64::consts::SQRT_2 * coeffs.s2.sup_opnorm(),
                crate::core::spectral_norm(&coeffs.h2),
                0.0,
                0.0,
            ],
        })
    }
}

/// What [`certify`] inspects.
#[derive(Debug, Clone)]
pub enum CertifyInput<'a> {
    /// A declared system; constants are extracted as operator norms.
    System(&'a BfsdeSystem),
    /// Game coefficients; constants follow the named variant's bounds.
    Coefficients(&'a GameCoefficients),
    /// Raw constants (for arithmetic-only checks of worked bounds).
    Constants(H5Constants),
}

/// Which sufficient criterion [`certify`] evaluates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum CertifyVariant {
    /// The discounting criterion on honestly extracted constants.
    General,
    /// The leader's stacked system with its stated stronger threshold
    /// `ρ* < −4·sup‖C‖²`.
    Bfsde2,
    /// The follower's Hamiltonian system with its stated stronger threshold
    /// `ρ* < −2·sup‖C‖²`.
    Follower,
    /// The explicit small-gain bound with hand-chosen splitting constants
    /// (the worked-constant route; reports θ).
    Remark61,
}

/// One inequality of a certificate, with its margin (positive = satisfied).
#[derive(Debug, Clone, Serialize)]
pub struct ConditionEntry {
    /// What the inequality asserts.
    pub name: String,
    /// Slack of the inequality; the verdict requires every margin > 0.
    pub margin: f64,
    /// `margin > 0`.
    pub holds: bool,
}

/// Outcome of a wellposedness check: the constants, the derived discount
/// data, the contraction factor, and every inequality with its margin.
///
/// `verdict` is `true` only when every logged inequality holds, in which
/// case `contraction_factor < 1`.  A failing certificate is a valid result,
/// not an error.  For the [`CertifyVariant::Remark61`] route the discount
/// fields are not used and report 0; `theta` is populated there instead.
#[derive(Debug, Clone, Serialize)]
pub struct WellposednessCertificate {
    /// Monotonicity rate of the forward drift.
    pub rho1: f64,
    /// Monotonicity rate of the backward driver (time-reversed).
    pub rho2: f64,
    /// Lipschitz constant of the drift in `X`.
    pub k1: f64,
    /// Lipschitz constant of the drift in `Z`.
    pub k2: f64,
    /// Lipschitz constant of the drift in `𝔼Z`.
    pub k3: f64,
    /// Lipschitz constant of the driver in `Y`.
    pub k4: f64,
    /// Lipschitz constant of the driver in `Z`.
    pub k5: f64,
    /// Lipschitz constant of the driver in `𝔼Z`.
    pub k6: f64,
    /// Lipschitz constant of the diffusion in `Y`.
    pub k7: f64,
    /// Lipschitz constant of the diffusion in `X`.
    pub k8: f64,
    /// Lipschitz constant of the diffusion in `Z`.
    pub k9: f64,
    /// Lipschitz constant of the initial coupling.
    pub k10: f64,
    /// Lipschitz constant of the terminal coupling in `Y(T)`.
    pub k11: f64,
    /// Lipschitz constant of the terminal coupling in `𝔼Y(T)`.
    pub k12: f64,
    /// Discount rate chosen by the one-dimensional margin-maximizing
    /// search (or the interval midpoint when no rate is feasible).
    pub rho: f64,
    /// Discounted dissipation margin of the forward half-step.
    pub rho_bar1: f64,
    /// Discounted dissipation margin of the backward half-step.
    pub rho_bar2: f64,
    /// The certified bound on the ratio of successive Picard update norms
    /// in `‖·‖_ρ` — the square root of the loop gain the criterion bounds,
    /// since the underlying estimates control squared norms.
    pub contraction_factor: f64,
    /// The explicit small-gain constant (populated by the worked-constant
    /// route only).
    pub theta: Option<f64>,
    /// `true` iff every logged inequality is satisfied.
    pub verdict: bool,
    /// Every inequality of the criterion, with its margin.
    pub condition_log: Vec<ConditionEntry>,
}

fn entry(name: &str, margin: f64) -> ConditionEntry {
    ConditionEntry {
        name: name.to_string(),
        margin,
        holds: margin > 0.0,
    }
}

/// Structural dissipation excess `d₀ = −2(ρ₁+ρ₂) − 2k₅² − 2k₆² − k₇²`: what
/// remains of the combined dissipation after the ε-free diffusion and
/// martingale feedback penalties.  A feasible discount interval exists only
/// when `d₀ > 0` and the splitting scale is small enough.
fn structural_excess(h5: &H5Constants) -> f64 {
    let [_, _, _, _, k5, k6, k7, ..] = h5.k;
    -2.0 * (h5.rho1 + h5.rho2) - 2.0 * k5 * k5 - 2.0 * k6 * k6 - k7 * k7
}

/// Weighted count of the ε-splitting penalties that are active: each of
/// `k₁…k₄` costs one ε, `k₅`/`k₆` cost two (their splitting constant adds
/// `2ε` on top of the structural `2k²`).
fn epsilon_weight(h5: &H5Constants) -> f64 {
    let [k1, k2, k3, k4, k5, k6, ..] = h5.k;
    let ind = |k: f64, w: f64| if k > 0.0 { w } else { 0.0 };
    ind(k1, 1.0) + ind(k2, 1.0) + ind(k3, 1.0) + ind(k4, 1.0) + ind(k5, 2.0) + ind(k6, 2.0)
}

/// Splitting scale when none is supplied: spend the structural excess
/// evenly over the active ε-penalties plus a two-share reserve for the two
/// dissipation margins, so the feasible discount interval stays nonempty
/// whenever `d₀ > 0`.
fn auto_epsilon(h5: &H5Constants) -> f64 {
    let d0 = structural_excess(h5);
    if d0 > 0.0 {
        d0 / (2.0 + epsilon_weight(h5))
    } else {
        1.0
    }
}

/// Young-splitting penalties entering the two discounted margins.  A zero
/// constant contributes nothing (its coupling term is absent).
fn split_penalties(h5: &H5Constants, eps: f64) -> (f64, f64) {
    let [k1, k2, k3, k4, k5, k6, k7, ..] = h5.k;
    let ind = |k: f64, pen: f64| if k > 0.0 { pen } else { 0.0 };
    let pen1 = ind(k1, eps) + ind(k2, eps) + ind(k3, eps) + k7 * k7;
    let pen2 = ind(k4, eps) + ind(k5, 2.0 * (k5 * k5 + eps)) + ind(k6, 2.0 * (k6 * k6 + eps));
    (pen1, pen2)
}

/// The three bracket factors of the discounting estimate at a given
/// discount: returns `(ρ̄₁, ρ̄₂, squared loop gain)`.
fn bracket_gain(h5: &H5Constants, eps: f64, rho: f64) -> (f64, f64, f64) {
    let [k1, k2, k3, k4, k5, k6, _, k8, k9, k10, k11, k12] = h5.k;
    let (pen1, pen2) = split_penalties(h5, eps);
    let rho_bar1 = rho - 2.0 * h5.rho1 - pen1;
    let rho_bar2 = -rho - 2.0 * h5.rho2 - pen2;

    // With the splitting cᵢ = kᵢ/ε each coupling product kᵢcᵢ is kᵢ²/ε.
    let gain = |k: f64| k * k / eps;
    let back_in = (k10 * k10).max(gain(k1) + k8 * k8).max(gain(k2) + gain(k3) + k9 * k9);
    let terminal_gain = 2.0 * k11 * k11 + 2.0 * k12 * k12;
    let forward_coupling = gain(k4);

    if back_in == 0.0 || (terminal_gain == 0.0 && forward_coupling == 0.0) {
        // No closed coupling loop: the iteration is constant after one
        // sweep, so the gain is zero for any discount split.
        return (rho_bar1, rho_bar2, 0.0);
    }

    let c5 = if k5 > 0.0 { k5 / (2.0 * (k5 * k5 + eps)) } else { 0.0 };
    let c6 = if k6 > 0.0 { k6 / (2.0 * (k6 * k6 + eps)) } else { 0.0 };
    let martingale_room = 1.0 - k5 * c5 - k6 * c6;
    let b1 = if rho_bar2 > 0.0 {
        1.0 / rho_bar2 + 1.0 / martingale_room + 1.0
    } else {
        f64::INFINITY
    };
    let b2 = if forward_coupling == 0.0 {
        terminal_gain
    } else if rho_bar1 > 0.0 {
        terminal_gain + forward_coupling / rho_bar1
    } else {
        f64::INFINITY
    };
    (rho_bar1, rho_bar2, b1 * b2 * back_in)
}

/// Picks the discount by a one-dimensional search: golden-section
/// minimization of the squared loop gain over the open interval where both
/// discounted dissipation margins are positive.  When that interval is
/// empty (or the gain is identically zero on it), the midpoint — the
/// margin-equalizing rate — is returned.
fn select_discount(h5: &H5Constants, eps: f64) -> f64 {
    let (pen1, pen2) = split_penalties(h5, eps);
    let lo = 2.0 * h5.rho1 + pen1; // ρ̄₁ > 0 ⟺ ρ > lo
    let hi = -2.0 * h5.rho2 - pen2; // ρ̄₂ > 0 ⟺ ρ < hi
    let mid = 0.5 * (lo + hi);
    if !(hi > lo) {
        return mid;
    }
    let inset = 1e-3 * (hi - lo);
    let (mut a, mut b) = (lo + inset, hi - inset);
    if bracket_gain(h5, eps, mid).2 == 0.0 {
        return mid;
    }
    // Golden-section: the gain is smooth and diverges at both ends, so a
    // minimizer is interior; 80 shrinks pin it far below certificate needs.
    let inv_phi = (5.0f64.sqrt() - 1.0) / 2.0;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let mut fc = bracket_gain(h5, eps, c).2;
    let mut fd = bracket_gain(h5, eps, d).2;
    for _ in 0..80 {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = bracket_gain(h5, eps, c).2;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = bracket_gain(h5, eps, d).2;
        }
    }
    0.5 * (a + b)
}

/// Evaluates the discounting criterion: choose the splitting scale and the
/// discount, derive both dissipation margins, and bound the contraction
/// factor of the two half-steps' composition.
fn discounting_certificate(
    h5: &H5Constants,
    epsilon: Option<f64>,
    headline: Vec<ConditionEntry>,
) -> WellposednessCertificate {
    let [k1, k2, k3, k4, k5, k6, k7, k8, k9, k10, k11, k12] = h5.k;
    let d0 = structural_excess(h5);
    let eps = epsilon.unwrap_or_else(|| auto_epsilon(h5));
    let rho = select_discount(h5, eps);
    let (rho_bar1, rho_bar2, gain) = bracket_gain(h5, eps, rho);
    let factor = gain.sqrt();

    let mut conditions = headline;
    let verdict;
    if gain == 0.0 {
        conditions.push(entry("contraction factor below one", 1.0));
        verdict = conditions.iter().all(|c| c.holds);
    } else {
        conditions.push(entry("structural dissipation exceeds diffusion feedback", d0));
        conditions.push(entry("forward discounted dissipation margin positive", rho_bar1));
        conditions.push(entry("backward discounted dissipation margin positive", rho_bar2));
        conditions.push(entry(
            "contraction factor below one",
            if factor.is_finite() { 1.0 - factor } else { f64::NEG_INFINITY },
        ));
        verdict = conditions.iter().all(|c| c.holds);
    }

    WellposednessCertificate {
        rho1: h5.rho1,
        rho2: h5.rho2,
        k1,
        k2,
        k3,
        k4,
        k5,
        k6,
        k7,
        k8,
        k9,
        k10,
        k11,
        k12,
        rho,
        rho_bar1,
        rho_bar2,
        contraction_factor: factor,
        theta: None,
        verdict,
        condition_log: conditions,
    }
}

/// Evaluates the explicit small-gain bound: with the hand-chosen splitting
/// constants, the iteration's squared gains are bounded by
///
/// ```text
///     θ = ( 2/(−4ρ₁ − 4k₅² − 3ε) + 5 + (2k₅² + 2k₆²)/ε )
///       · ( 2k₉² + 2k₄²/(−ε(4ρ₁ + 4k₅² + 3ε)) ),
/// ```
///
/// and the loop contracts when `k₉²θ`, `k₁₀²θ`, and `k₁²θ/ε` all fall
/// below one; the square root of the largest of the three is the reported
/// contraction factor (the gains bound squared norms).
fn small_gain_certificate(h5: &H5Constants, eps: f64) -> WellposednessCertificate {
    let [k1, k2, k3, k4, k5, k6, k7, k8, k9, k10, k11, k12] = h5.k;
    let margin = -4.0 * h5.rho1 - 4.0 * k5 * k5 - 3.0 * eps;
    let mut conditions = vec![entry(
        "structural dissipation exceeds diffusion feedback and splitting scale",
        margin,
    )];
    let (theta, factor) = if margin > 0.0 {
        let theta = (2.0 / margin + 5.0 + (2.0 * k5 * k5 + 2.0 * k6 * k6) / eps)
            * (2.0 * k9 * k9 + 2.0 * k4 * k4 / (eps * margin));
        let gains = [
            ("martingale loop gain below one", k9 * k9 * theta),
            ("initial-coupling loop gain below one", k10 * k10 * theta),
            ("backward-coupling loop gain below one", k1 * k1 * theta / eps),
        ];
        let mut worst = 0.0f64;
        for (name, g) in gains {
            conditions.push(entry(name, 1.0 - g));
            worst = worst.max(g);
        }
        (Some(theta), worst.sqrt())
    } else {
        (None, f64::INFINITY)
    };
    let verdict = conditions.iter().all(|c| c.holds);
    WellposednessCertificate {
        rho1: h5.rho1,
        rho2: h5.rho2,
        k1,
        k2,
        k3,
        k4,
        k5,
        k6,
        k7,
        k8,
        k9,
        k10,
        k11,
        k12,
        rho: 0.0,
        rho_bar1: 0.0,
        rho_bar2: 0.0,
        contraction_factor: factor,
        theta,
        verdict,
        condition_log: conditions,
    }
}

/// Evaluates a sufficient wellposedness criterion and reports every
/// inequality with its margin.
///
/// * [`CertifyVariant::General`] accepts a system (constants extracted as
///   operator norms) or raw constants, and runs the discounting criterion.
/// * [`CertifyVariant::Bfsde2`] and [`CertifyVariant::Follower`] accept
///   game coefficients, use the stated block bounds of the respective
///   optimality system, and additionally log that system's stated stronger
///   threshold on `ρ* = sup Λ_max(−½(A + Aᵀ))`.
/// * [`CertifyVariant::Remark61`] accepts raw constants and runs the
///   explicit small-gain route (`epsilon` defaults to 1 there; elsewhere
///   the splitting scale is derived from the structural excess).
///
/// A failing certificate is a valid result — errors are reserved for
/// input/variant mismatches and genuinely invalid data (singular weights).
pub fn certify(
    input: &CertifyInput,
    variant: CertifyVariant,
    epsilon: Option<f64>,
) -> Result<WellposednessCertificate> {
    if let Some(e) = epsilon {
        if !(e > 0.0) || !e.is_finite() {
            return Err(Error::invalid(
                "epsilon",
                format!("splitting scale must be positive and finite, got {e}"),
            ));
        }
    }
    match (variant, input) {
        (CertifyVariant::General, CertifyInput::System(system)) => {
            system.validate(&system.drift.on_y.grid)?;
            Ok(discounting_certificate(
                &H5Constants::from_system(system),
                epsilon,
                Vec::new(),
            ))
        }
        (CertifyVariant::General, CertifyInput::Constants(h5)) => {
            Ok(discounting_certificate(h5, epsilon, Vec::new()))
        }
        (CertifyVariant::Bfsde2, CertifyInput::Coefficients(coeffs)) => {
            let h5 = H5Constants::stacked_leader(coeffs)?;
            let c_norm = coeffs.c.sup_opnorm();
            let headline = vec![entry(
                "stacked-system dissipation threshold: rho* < -4 sup|C|^2",
                -4.0 * c_norm * c_norm - h5.rho1,
            )];
            Ok(discounting_certificate(&h5, epsilon, headline))
        }
        (CertifyVariant::Follower, CertifyInput::Coefficients(coeffs)) => {
            let h5 = H5Constants::follower_hamiltonian(coeffs)?;
            let c_norm = coeffs.c.sup_opnorm();
            let headline = vec![entry(
                "follower-system dissipation threshold: rho* < -2 sup|C|^2",
                -2.0 * c_norm * c_norm - h5.rho1,
            )];
            Ok(discounting_certificate(&h5, epsilon, headline))
        }
        (CertifyVariant::Remark61, CertifyInput::Constants(h5)) => {
            Ok(small_gain_certificate(h5, epsilon.unwrap_or(1.0)))
        }
        (variant, input) => {
            let kind = match input {
                CertifyInput::System(_) => "a declared system",
                CertifyInput::Coefficients(_) => "game coefficients",
                CertifyInput::Constants(_) => "raw constants",
            };
            Err(Error::invalid(
                "input",
                format!("variant {variant:?} cannot be certified from {kind}"),
            ))
        }
    }
}

// ======================================================================
// Tests
// ======================================================================
