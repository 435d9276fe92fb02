//! The problem-description schema: one TOML file describes one game.
//!
//! A config names the dimensions, the horizon and grid, the scenario
//! ensemble, every coefficient (constant or nodewise), the terminal
//! constraint pair, the solver route, the tolerances, and the output
//! directory.  [`ProblemConfig::build`] performs *all* validation before any
//! numerics run: every matrix dimension is cross-checked, symmetric weights
//! are symmetrised when the asymmetry drift is below
//! [`SYMMETRY_REJECT_TOL`] and rejected otherwise, and every scalar is
//! checked for finiteness.  A config that fails here exits the process with
//! status 2 and writes nothing.
//!
//! Matrices are written **row-major**: `[[1, 2], [3, 4]]` is the 2×2 matrix
//! with first row `(1, 2)`.  Nodewise coefficients are arrays of such
//! matrices with exactly `steps + 1` entries, one per grid node.  Box bounds
//! may use the TOML float literals `inf` and `-inf`; every other numeric
//! entry must be finite.
//!
//! The resolved config (after command-line overrides) is what gets digested
//! and echoed into the output directory, so a run is reproducible from its
//! digest and seed alone.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use stackelberg_bsde::constraints::{ConstraintSpec, ConvexSet};
use stackelberg_bsde::core::{
    build_grid, sample_ensemble, MatrixPath, ScenarioEnsemble, TimeGrid, VectorPath,
};
use stackelberg_bsde::follower::{GameCoefficients, TerminalControl};

/// Largest tolerated asymmetry `max |M − Mᵀ|` of a symmetric weight; drifts
/// below this are silently symmetrised (and reported), larger ones are
/// schema errors.
pub const SYMMETRY_REJECT_TOL: f64 = 1e-12;

/// A dense matrix in config form: rows of equal length, row-major.
pub type TomlMatrix = Vec<Vec<f64>>;

/// Schema-level failure: the config cannot describe a well-formed problem.
///
/// Carried as a plain message; the binary maps it to exit status 2.
#[derive(Debug)]
pub struct SchemaError(pub String);

impl std::fmt::Display for SchemaError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::error::Error for SchemaError {}

fn schema<T>(msg: impl Into<String>) -> Result<T, SchemaError> {
    Err(SchemaError(msg.into()))
}

// ======================================================================
// Schema types
// ======================================================================

/// Complete description of one run.  See the module docs for the format.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    /// State and control dimensions.
    pub dimensions: Dimensions,
    /// Horizon and grid resolution.
    pub time: Time,
    /// Scenario ensemble; omit the whole table for a deterministic run.
    #[serde(default)]
    pub ensemble: Ensemble,
    /// All game coefficients.
    pub coefficients: Coefficients,
    /// The terminal constraint pair.
    pub constraint: Constraint,
    /// Which solver route to run, plus route-specific inputs.
    pub solver: SolverSection,
    /// Numeric tolerances (all defaulted).
    #[serde(default)]
    pub tolerances: Tolerances,
    /// Where output lands and how verbose it is.
    #[serde(default)]
    pub output: Output,
}

/// Problem dimensions.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dimensions {
    /// State dimension `n ≥ 1`.
    pub state: usize,
    /// Leader control dimension `m₁ ≥ 1`.
    pub leader: usize,
    /// Follower control dimension `m₂ ≥ 1`.
    pub follower: usize,
}

/// Horizon and grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Time {
    /// Horizon `T > 0`.
    pub horizon: f64,
    /// Number of uniform steps `N ≥ 1` (the grid has `N + 1` nodes).
    pub steps: usize,
}

/// Scenario ensemble.
///
/// Omitting the whole `[ensemble]` table gives the degenerate single
/// scenario (all Brownian increments zero), which reproduces deterministic
/// dynamics exactly.  Writing the table switches to Monte Carlo sampling
/// unless `degenerate = true` is set explicitly.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ensemble {
    /// Number of scenarios `M ≥ 1`.
    #[serde(default = "default_scenarios")]
    pub scenarios: usize,
    /// Seed of the Brownian increment sampler.
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Antithetic pairing (`M` must then be even).
    #[serde(default)]
    pub antithetic: bool,
    /// All increments zero: scenario-wise deterministic dynamics.
    #[serde(default)]
    pub degenerate: bool,
}

fn default_scenarios() -> usize {
    1
}

fn default_seed() -> u64 {
    42
}

impl Default for Ensemble {
    /// The implicit ensemble of a config without an `[ensemble]` table:
    /// one degenerate scenario, i.e. a fully deterministic run.
    fn default() -> Self {
        Ensemble {
            scenarios: 1,
            seed: default_seed(),
            antithetic: false,
            degenerate: true,
        }
    }
}

/// One coefficient: either a constant matrix or one matrix per grid node.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoefficientTable {
    /// Constant-in-time value.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub constant: Option<TomlMatrix>,
    /// One value per node; must have exactly `steps + 1` entries.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nodewise: Option<Vec<TomlMatrix>>,
}

/// All game coefficients.  Paths may be constant or nodewise; the terminal
/// and initial weights are single matrices.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Coefficients {
    /// Drift feedback `A(·)`, `n×n`.
    pub a: CoefficientTable,
    /// Leader control channel `B₁(·)`, `n×m₁`.
    pub b1: CoefficientTable,
    /// Follower control channel `B₂(·)`, `n×m₂`.
    pub b2: CoefficientTable,
    /// Diffusion feedback `C(·)`, `n×n`.
    pub c: CoefficientTable,
    /// Leader state weight `Q₁(·)`, symmetric `n×n`.
    pub q1: CoefficientTable,
    /// Follower state weight `Q₂(·)`, symmetric `n×n`.
    pub q2: CoefficientTable,
    /// Leader diffusion weight `S₁(·)`, symmetric `n×n`.
    pub s1: CoefficientTable,
    /// Follower diffusion weight `S₂(·)`, symmetric `n×n`.
    pub s2: CoefficientTable,
    /// Leader control weight `R₁₁(·)`, symmetric invertible `m₁×m₁`.
    pub r11: CoefficientTable,
    /// Follower control weight `R₂₂(·)`, symmetric invertible `m₂×m₂`.
    pub r22: CoefficientTable,
    /// Leader terminal weight `G₁`, symmetric positive definite `n×n`.
    pub g1: TomlMatrix,
    /// Leader initial weight `H₁`, symmetric `n×n`.
    pub h1: TomlMatrix,
    /// Follower initial weight `H₂`, symmetric `n×n`.
    pub h2: TomlMatrix,
}

/// The terminal constraint pair `ξ ∈ K` and `⟨α, 𝔼ξ⟩ ≥ β`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Constraint {
    /// Impose the pointwise constraint `ξ ∈ K`.
    pub pointwise: bool,
    /// Impose the affine expectation constraint `⟨α, 𝔼ξ⟩ ≥ β`.
    pub affine: bool,
    /// Direction `α` (required nonzero when `affine`; defaults to zero).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub alpha: Vec<f64>,
    /// Level `β`.
    #[serde(default)]
    pub beta: f64,
    /// The set `K` (defaults to all of ℝⁿ).
    #[serde(default)]
    pub set: SetConfig,
}

/// Serialized form of the constraint set.
///
/// The unit variants take their dimension from `[dimensions].state`.  Box
/// bounds admit the TOML literals `inf` / `-inf` as one-sided sentinels.
/// (Internally tagged enums cannot reject unknown keys, so stray keys under
/// `constraint.set` are ignored rather than rejected.)
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SetConfig {
    /// All of ℝⁿ (no pointwise restriction).
    #[default]
    FullSpace,
    /// `{x : lower ≤ x ≤ upper}` componentwise.
    Box {
        /// Lower bounds; `-inf` entries drop the bound.
        lower: Vec<f64>,
        /// Upper bounds; `inf` entries drop the bound.
        upper: Vec<f64>,
    },
    /// `{x : x ≥ 0}`.
    NonnegativeOrthant,
    /// `{x : ⟨normal, x⟩ ≤ offset}`.
    Halfspace {
        /// Outward normal (nonzero).
        normal: Vec<f64>,
        /// Offset `c`.
        offset: f64,
    },
    /// The singleton `{value}`.
    Point {
        /// The single admissible terminal value.
        value: Vec<f64>,
    },
}

/// Which route to run, plus the inputs only some routes take.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSection {
    /// The route.
    pub kind: SolverKind,
    /// Fixed terminal mean `ξ₀` — `blq` route only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub xi: Option<Vec<f64>>,
    /// Optional noise loading `ξ₁` for `ξ = ξ₀ + ξ₁·W(T)` — `blq` only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub xi_noise: Option<Vec<f64>>,
    /// Fixed leader control path (`m₁×1` table) — `blq` only; defaults to 0.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub u1: Option<CoefficientTable>,
    /// Skip the wellposedness/convexity gate of the fixed-point routes.
    /// The gate's criteria are sufficient only, so a refusal is not a proof
    /// of failure — overriding attempts the iteration regardless.
    #[serde(default)]
    pub override_certificate: bool,
}

/// Solver routes the `solve` command dispatches on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SolverKind {
    /// Follower best response to the config's fixed `(ξ, u₁)`.
    Blq,
    /// Leader with the pointwise constraint only (Picard fixed point).
    P1,
    /// Leader with the affine expectation constraint only (Riccati route).
    P2,
    /// Leader with both constraints (KKT multiplier search over λ).
    General,
    /// No solve: evaluate every certificate and stop.
    Certify,
    /// Solve and compare against the discrete bilevel oracle.
    Oracle,
}

impl SolverKind {
    /// Lower-case config spelling; used in reports and file names.
    pub fn name(self) -> &'static str {
        match self {
            SolverKind::Blq => "blq",
            SolverKind::P1 => "p1",
            SolverKind::P2 => "p2",
            SolverKind::General => "general",
            SolverKind::Certify => "certify",
            SolverKind::Oracle => "oracle",
        }
    }
}

/// Numeric tolerances, all defaulted.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tolerances {
    /// Picard update norm below which the fixed-point iteration stops.
    #[serde(default = "default_picard")]
    pub picard: f64,
    /// Picard iteration cap.
    #[serde(default = "default_max_iterations")]
    pub max_iterations: usize,
    /// Margin tolerance for the KKT verification report.
    #[serde(default = "default_kkt")]
    pub kkt: f64,
    /// Relative gap the oracle comparison verdict is taken against.
    #[serde(default = "default_comparison")]
    pub comparison: f64,
    /// Polynomial degree of the conditional-expectation regression
    /// (defaults to the library's choice when omitted).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub regression_degree: Option<usize>,
}

fn default_picard() -> f64 {
    1e-9
}

fn default_max_iterations() -> usize {
    200
}

fn default_kkt() -> f64 {
    1e-6
}

fn default_comparison() -> f64 {
    5e-3
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            picard: default_picard(),
            max_iterations: default_max_iterations(),
            kkt: default_kkt(),
            comparison: default_comparison(),
            regression_degree: None,
        }
    }
}

/// Output location and verbosity.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Output {
    /// Directory all files land in (created if absent).
    #[serde(default = "default_directory")]
    pub directory: String,
    /// Also dump every scenario's raw paths (can be large).
    #[serde(default)]
    pub raw_scenarios: bool,
}

fn default_directory() -> String {
    "out".to_string()
}

impl Default for Output {
    fn default() -> Self {
        Output {
            directory: default_directory(),
            raw_scenarios: false,
        }
    }
}

// ======================================================================
// Command-line overrides
// ======================================================================

/// The flag overrides applied on top of a loaded config.  The *resolved*
/// config (after these) is what gets digested and echoed, so reproducing a
/// run never requires remembering the flags.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    /// `--out DIR`.
    pub out: Option<String>,
    /// `--seed INT`.
    pub seed: Option<u64>,
    /// `--scenarios INT` (also turns a degenerate ensemble into a sampled
    /// one, since asking for scenarios means asking for Monte Carlo).
    pub scenarios: Option<usize>,
    /// `--grid INT` (number of steps).
    pub grid: Option<usize>,
    /// `--tol FLOAT` (the Picard/fixed-point tolerance).
    pub tol: Option<f64>,
    /// `--override-certificate`.
    pub override_certificate: bool,
}

// ======================================================================
// Building: config → library inputs
// ======================================================================

/// Everything the runner needs, built and cross-checked from one config.
#[derive(Debug, Clone)]
pub struct BuiltProblem {
    /// Validated game coefficients on the grid.
    pub coeffs: GameCoefficients,
    /// The uniform grid.
    pub grid: TimeGrid,
    /// The terminal constraint pair.
    pub spec: ConstraintSpec,
    /// The Brownian scenario ensemble.
    pub ensemble: ScenarioEnsemble,
    /// Fixed `(ξ, u₁)` for the follower-only route.
    pub blq_inputs: Option<(TerminalControl, VectorPath)>,
    /// Largest asymmetry drift that was symmetrised away (diagnostic).
    pub symmetrization_max: f64,
}

impl ProblemConfig {
    /// Parses a config from TOML text.
    ///
    /// # Errors
    ///
    /// [`SchemaError`] with the TOML parser's message (unknown keys are
    /// rejected, so typos surface here).
    pub fn from_toml(text: &str) -> Result<Self, SchemaError> {
        toml::from_str(text).map_err(|e| SchemaError(format!("config does not parse: {e}")))
    }

    /// Serialises the config back to canonical TOML (stable key order).
    ///
    /// # Errors
    ///
    /// [`SchemaError`] if serialisation fails (cannot happen for a config
    /// that parsed).
    pub fn to_toml(&self) -> Result<String, SchemaError> {
        toml::to_string_pretty(self)
            .map_err(|e| SchemaError(format!("config does not serialise: {e}")))
    }

    /// Applies command-line overrides in place.
    pub fn apply_overrides(&mut self, ov: &Overrides) {
        if let Some(out) = &ov.out {
            self.output.directory = out.clone();
        }
        if let Some(seed) = ov.seed {
            self.ensemble.seed = seed;
            self.ensemble.degenerate = false;
        }
        if let Some(m) = ov.scenarios {
            self.ensemble.scenarios = m;
            self.ensemble.degenerate = false;
        }
        if let Some(steps) = ov.grid {
            self.time.steps = steps;
        }
        if let Some(tol) = ov.tol {
            self.tolerances.picard = tol;
        }
        if ov.override_certificate {
            self.solver.override_certificate = true;
        }
    }

    /// FNV-1a digest of the canonical TOML serialisation, formatted
    /// `fnv1a64:<16 hex digits>`.  Two configs share a digest exactly when
    /// they resolve to the same *problem*: the `[output]` section (where
    /// files land, whether raw scenarios are dumped) is normalised away
    /// first, since it changes no computed number — so re-running an echoed
    /// config into a different directory reproduces the same digest.
    ///
    /// # Errors
    ///
    /// [`SchemaError`] if the config does not serialise.
    pub fn digest(&self) -> Result<String, SchemaError> {
        let mut canonical = self.clone();
        canonical.output = Output::default();
        let text = canonical.to_toml()?;
        Ok(format!("fnv1a64:{:016x}", fnv1a64(text.as_bytes())))
    }

    /// Validates everything and builds the library inputs.
    ///
    /// # Errors
    ///
    /// [`SchemaError`] naming the offending field; nothing numeric has run
    /// when this fails.
    pub fn build(&self) -> Result<BuiltProblem, SchemaError> {
        let n = self.dimensions.state;
        let m1 = self.dimensions.leader;
        let m2 = self.dimensions.follower;
        if n == 0 || m1 == 0 || m2 == 0 {
            return schema(format!(
                "dimensions must all be at least 1, got state {n}, leader {m1}, follower {m2}"
            ));
        }

        if !self.time.horizon.is_finite() || self.time.horizon <= 0.0 {
            return schema(format!(
                "time.horizon must be positive and finite, got {}",
                self.time.horizon
            ));
        }
        if self.time.steps == 0 {
            return schema("time.steps must be at least 1");
        }
        let grid = build_grid(self.time.horizon, self.time.steps)
            .map_err(|e| SchemaError(format!("time grid rejected: {e}")))?;

        let mut sym_max = 0.0f64;
        let c = &self.coefficients;
        let a = build_path("coefficients.a", &c.a, n, n, &grid, None)?;
        let b1 = build_path("coefficients.b1", &c.b1, n, m1, &grid, None)?;
        let b2 = build_path("coefficients.b2", &c.b2, n, m2, &grid, None)?;
        let cc = build_path("coefficients.c", &c.c, n, n, &grid, None)?;
        let q1 = build_path("coefficients.q1", &c.q1, n, n, &grid, Some(&mut sym_max))?;
        let q2 = build_path("coefficients.q2", &c.q2, n, n, &grid, Some(&mut sym_max))?;
        let s1 = build_path("coefficients.s1", &c.s1, n, n, &grid, Some(&mut sym_max))?;
        let s2 = build_path("coefficients.s2", &c.s2, n, n, &grid, Some(&mut sym_max))?;
        let r11 = build_path("coefficients.r11", &c.r11, m1, m1, &grid, Some(&mut sym_max))?;
        let r22 = build_path("coefficients.r22", &c.r22, m2, m2, &grid, Some(&mut sym_max))?;
        let g1 = build_weight("coefficients.g1", &c.g1, n, &mut sym_max)?;
        let h1 = build_weight("coefficients.h1", &c.h1, n, &mut sym_max)?;
        let h2 = build_weight("coefficients.h2", &c.h2, n, &mut sym_max)?;

        let coeffs = GameCoefficients {
            n,
            m1,
            m2,
            a,
            b1,
            b2,
            c: cc,
            q1,
            q2,
            s1,
            s2,
            r11,
            r22,
            g1,
            h1,
            h2,
        };
        coeffs
            .validate()
            .map_err(|e| SchemaError(format!("coefficients rejected: {e}")))?;

        let spec = self.build_constraint(n)?;

        let ens = &self.ensemble;
        if ens.scenarios == 0 {
            return schema("ensemble.scenarios must be at least 1");
        }
        let ensemble = if ens.degenerate {
            ScenarioEnsemble::degenerate(&grid, ens.scenarios)
        } else {
            sample_ensemble(&grid, ens.scenarios, ens.seed, ens.antithetic)
                .map_err(|e| SchemaError(format!("ensemble rejected: {e}")))?
        };

        let blq_inputs = self.build_blq_inputs(n, m1, &grid)?;

        let t = &self.tolerances;
        for (name, value) in [("picard", t.picard), ("kkt", t.kkt), ("comparison", t.comparison)]
        {
            if !value.is_finite() || value <= 0.0 {
                return schema(format!(
                    "tolerances.{name} must be positive and finite, got {value}"
                ));
            }
        }
        if t.max_iterations == 0 {
            return schema("tolerances.max_iterations must be at least 1");
        }

        Ok(BuiltProblem {
            coeffs,
            grid,
            spec,
            ensemble,
            blq_inputs,
            symmetrization_max: sym_max,
        })
    }

    /// Builds and validates the constraint pair.
    fn build_constraint(&self, n: usize) -> Result<ConstraintSpec, SchemaError> {
        let con = &self.constraint;
        let k = match &con.set {
            SetConfig::FullSpace => ConvexSet::FullSpace(n),
            SetConfig::NonnegativeOrthant => ConvexSet::NonnegativeOrthant(n),
            SetConfig::Box { lower, upper } => {
                let lo = finite_or_inf_vector("constraint.set.lower", lower, n)?;
                let hi = finite_or_inf_vector("constraint.set.upper", upper, n)?;
                ConvexSet::Box {
                    lower: lo,
                    upper: hi,
                }
            }
            SetConfig::Halfspace { normal, offset } => {
                let nv = finite_vector("constraint.set.normal", normal, n)?;
                if !offset.is_finite() {
                    return schema(format!(
                        "constraint.set.offset must be finite, got {offset}"
                    ));
                }
                ConvexSet::Halfspace {
                    normal: nv,
                    offset: *offset,
                }
            }
            SetConfig::Point { value } => {
                ConvexSet::Point(finite_vector("constraint.set.value", value, n)?)
            }
        };
        k.validate()
            .map_err(|e| SchemaError(format!("constraint set rejected: {e}")))?;

        let alpha = if con.alpha.is_empty() {
            if con.affine {
                return schema(
                    "constraint.alpha is required (and must be nonzero) when the affine \
                     constraint is enabled",
                );
            }
            DVector::zeros(n)
        } else {
            finite_vector("constraint.alpha", &con.alpha, n)?
        };
        if !con.beta.is_finite() {
            return schema(format!("constraint.beta must be finite, got {}", con.beta));
        }

        let spec = ConstraintSpec {
            k,
            alpha,
            beta: con.beta,
            pointwise_enabled: con.pointwise,
            affine_enabled: con.affine,
        };
        spec.validate()
            .map_err(|e| SchemaError(format!("constraint rejected: {e}")))?;
        Ok(spec)
    }

    /// Builds the follower-route inputs; rejects them on other routes.
    fn build_blq_inputs(
        &self,
        n: usize,
        m1: usize,
        grid: &TimeGrid,
    ) -> Result<Option<(TerminalControl, VectorPath)>, SchemaError> {
        let s = &self.solver;
        if s.kind != SolverKind::Blq {
            if s.xi.is_some() || s.xi_noise.is_some() || s.u1.is_some() {
                return schema(format!(
                    "solver.xi / solver.xi_noise / solver.u1 are only meaningful for the blq \
                     route, but solver.kind is '{}'",
                    s.kind.name()
                ));
            }
            return Ok(None);
        }

        let Some(xi_raw) = &s.xi else {
            return schema("solver.kind = 'blq' requires solver.xi (the fixed terminal mean)");
        };
        let xi0 = finite_vector("solver.xi", xi_raw, n)?;
        let xi = match &s.xi_noise {
            None => TerminalControl::Deterministic(xi0),
            Some(noise) => TerminalControl::LinearInW {
                xi0,
                xi1: finite_vector("solver.xi_noise", noise, n)?,
            },
        };

        let u1 = match &s.u1 {
            None => VectorPath::zeros(grid, 1, m1),
            Some(table) => {
                let path = build_path("solver.u1", table, m1, 1, grid, None)?;
                let nodes: Vec<DVector<f64>> = path
                    .values
                    .iter()
                    .map(|m| DVector::from_column_slice(m.as_slice()))
                    .collect();
                VectorPath::from_deterministic(grid, &nodes)
            }
        };
        Ok(Some((xi, u1)))
    }
}

// ======================================================================
// Matrix plumbing
// ======================================================================

/// Converts a row-major config matrix, checking shape and finiteness.
fn toml_matrix(
    name: &str,
    rows: &TomlMatrix,
    expect_rows: usize,
    expect_cols: usize,
) -> Result<DMatrix<f64>, SchemaError> {
    if rows.len() != expect_rows {
        return schema(format!(
            "{name} must have {expect_rows} rows, got {}",
            rows.len()
        ));
    }
    for (i, row) in rows.iter().enumerate() {
        if row.len() != expect_cols {
            return schema(format!(
                "{name} row {i} must have {expect_cols} entries, got {}",
                row.len()
            ));
        }
        for (j, v) in row.iter().enumerate() {
            if !v.is_finite() {
                return schema(format!("{name}[{i}][{j}] must be finite, got {v}"));
            }
        }
    }
    Ok(DMatrix::from_fn(expect_rows, expect_cols, |i, j| {
        rows[i][j]
    }))
}

/// Builds one coefficient path from its table form.
///
/// `symmetrize` marks a symmetric weight: the asymmetry drift
/// `max |M − Mᵀ|` is folded into the running maximum and the value is
/// replaced by `(M + Mᵀ)/2`; drifts above [`SYMMETRY_REJECT_TOL`] are
/// schema errors.
fn build_path(
    name: &str,
    table: &CoefficientTable,
    rows: usize,
    cols: usize,
    grid: &TimeGrid,
    mut symmetrize: Option<&mut f64>,
) -> Result<MatrixPath, SchemaError> {
    let mut handle = |m: DMatrix<f64>, node: &str| -> Result<DMatrix<f64>, SchemaError> {
        match symmetrize.as_deref_mut() {
            None => Ok(m),
            Some(track) => {
                let drift = (&m - m.transpose()).amax();
                if drift > SYMMETRY_REJECT_TOL {
                    return schema(format!(
                        "{name}{node} is asymmetric by {drift:.3e} (tolerance \
                         {SYMMETRY_REJECT_TOL:.0e}); symmetric weights are required"
                    ));
                }
                *track = track.max(drift);
                Ok((&m + m.transpose()) * 0.5)
            }
        }
    };

    match (&table.constant, &table.nodewise) {
        (Some(m), None) => {
            let value = handle(toml_matrix(name, m, rows, cols)?, "")?;
            Ok(MatrixPath::constant(grid, value))
        }
        (None, Some(list)) => {
            if list.len() != grid.len() {
                return schema(format!(
                    "{name} is nodewise and must have steps + 1 = {} entries, got {}",
                    grid.len(),
                    list.len()
                ));
            }
            let mut values = Vec::with_capacity(list.len());
            for (k, m) in list.iter().enumerate() {
                let label = format!(" (node {k})");
                values.push(handle(toml_matrix(name, m, rows, cols)?, &label)?);
            }
            Ok(MatrixPath {
                grid: grid.clone(),
                values,
            })
        }
        (Some(_), Some(_)) => schema(format!(
            "{name} sets both 'constant' and 'nodewise'; pick exactly one"
        )),
        (None, None) => schema(format!("{name} needs either 'constant' or 'nodewise'")),
    }
}

/// Builds one terminal/initial weight matrix, always symmetrised.
fn build_weight(
    name: &str,
    m: &TomlMatrix,
    n: usize,
    sym_max: &mut f64,
) -> Result<DMatrix<f64>, SchemaError> {
    let value = toml_matrix(name, m, n, n)?;
    let drift = (&value - value.transpose()).amax();
    if drift > SYMMETRY_REJECT_TOL {
        return schema(format!(
            "{name} is asymmetric by {drift:.3e} (tolerance {SYMMETRY_REJECT_TOL:.0e}); \
             symmetric weights are required"
        ));
    }
    *sym_max = sym_max.max(drift);
    Ok((&value + value.transpose()) * 0.5)
}

/// A vector of exactly `n` finite entries.
fn finite_vector(name: &str, v: &[f64], n: usize) -> Result<DVector<f64>, SchemaError> {
    if v.len() != n {
        return schema(format!("{name} must have {n} entries, got {}", v.len()));
    }
    for (i, x) in v.iter().enumerate() {
        if !x.is_finite() {
            return schema(format!("{name}[{i}] must be finite, got {x}"));
        }
    }
    Ok(DVector::from_column_slice(v))
}

/// A vector of exactly `n` entries where `±inf` is allowed but NaN is not.
fn finite_or_inf_vector(name: &str, v: &[f64], n: usize) -> Result<DVector<f64>, SchemaError> {
    if v.len() != n {
        return schema(format!("{name} must have {n} entries, got {}", v.len()));
    }
    for (i, x) in v.iter().enumerate() {
        if x.is_nan() {
            return schema(format!("{name}[{i}] must not be NaN"));
        }
    }
    Ok(DVector::from_column_slice(v))
}

/// 64-bit FNV-1a over a byte string (the config digest hash).
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

// ======================================================================
// Tests
// ======================================================================
