//! The terminal constraint set, its support functionals, feasibility
//! classification, and metric projections.
//!
//! The leader's terminal control `ξ` is restricted by the intersection of
//!
//! * a **pointwise** constraint `ξ(ω) ∈ K` almost surely, for a nonempty
//!   closed convex set `K ⊂ ℝⁿ`, and
//! * an **affine expectation** constraint `⟨α, 𝔼ξ⟩ ≥ β`.
//!
//! Feasibility of the pair is decided by the support functional
//! `h*_K(p) = sup_{x∈K} ⟨p, x⟩` and by the *breadth* of `K` along `α`,
//! `h*_K(α) + h*_K(−α)`:
//!
//! | breadth | position of β                     | verdict            |
//! |---------|-----------------------------------|--------------------|
//! | > 0     | β ≤ −h*(−α)                       | `PointwiseOnly`    |
//! | > 0     | −h*(−α) < β < h*(α)               | `NontrivialBoth`   |
//! | > 0     | β = h*(α)                         | `ExposedFace`      |
//! | > 0     | β > h*(α)                         | `Empty`            |
//! | = 0     | β ≤ h*(α)                         | `DegeneratedBreadth` → `PointwiseOnly` |
//! | = 0     | β > h*(α)                         | `DegeneratedBreadth` → `Empty` |
//!
//! The strict two-sided condition `−h*(−α) < β < h*(α)` (reported as
//! `condition_f`) is what the KKT machinery needs; the one-sided Slater
//! condition `β < h*(α)` is reported alongside.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::{Error, Result};

/// Tolerance used for projection feasibility and active-set optimality.
pub const PROJECTION_TOL: f64 = 1e-12;

/// Membership tolerance for [`ConvexSet::contains`].
pub const MEMBERSHIP_TOL: f64 = 1e-10;

/// Hard cap on the dimension for active-set enumeration under a
/// non-diagonal metric (3ⁿ candidate active sets).
const ACTIVE_SET_DIM_CAP: usize = 8;

// ======================================================================
// Extended reals
// ======================================================================

/// A tagged extended real, used instead of floating ±∞ so that support
/// values serialize exactly in reports.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum ExtendedReal {
    /// A finite value.
    Finite(f64),
    /// `+∞`.
    PlusInfinity,
    /// `−∞`.
    MinusInfinity,
}

impl ExtendedReal {
    /// Converts a float, mapping IEEE infinities to the tagged variants.
    pub fn from_f64(x: f64) -> Self {
        if x == f64::INFINITY {
            ExtendedReal::PlusInfinity
        } else if x == f64::NEG_INFINITY {
            ExtendedReal::MinusInfinity
        } else {
            ExtendedReal::Finite(x)
        }
    }

    /// The value as an IEEE float (`±∞` for the infinite variants).
    pub fn as_f64(self) -> f64 {
        match self {
            ExtendedReal::Finite(x) => x,
            ExtendedReal::PlusInfinity => f64::INFINITY,
            ExtendedReal::MinusInfinity => f64::NEG_INFINITY,
        }
    }

    /// `true` iff finite.
    pub fn is_finite(self) -> bool {
        matches!(self, ExtendedReal::Finite(_))
    }

    /// Extended-real sum (`+∞ + finite = +∞`; `+∞ + (−∞)` never occurs for
    /// support values and panics).
    pub fn add(self, other: ExtendedReal) -> ExtendedReal {
        ExtendedReal::from_f64(self.as_f64() + other.as_f64())
    }
}

// ======================================================================
// Convex sets
// ======================================================================

/// A nonempty closed convex subset of ℝⁿ, restricted to the shapes the
/// solvers can project onto exactly.
#[derive(Debug, Clone, PartialEq)]
pub enum ConvexSet {
    /// All of ℝⁿ.
    FullSpace(usize),
    /// Axis-aligned box `{x : lower ≤ x ≤ upper}`; entries of `lower` may be
    /// `−∞` and entries of `upper` may be `+∞`.
    Box {
        /// Componentwise lower bounds (`−∞` allowed).
        lower: DVector<f64>,
        /// Componentwise upper bounds (`+∞` allowed).
        upper: DVector<f64>,
    },
    /// `{x : x ≥ 0}`.
    NonnegativeOrthant(usize),
    /// `{x : ⟨normal, x⟩ ≤ offset}`.
    Halfspace {
        /// The outward normal (nonzero).
        normal: DVector<f64>,
        /// The offset `c` in `⟨normal, x⟩ ≤ c`.
        offset: f64,
    },
    /// The singleton `{c}`.
    Point(DVector<f64>),
}

impl ConvexSet {
    /// Ambient dimension `n`.
    pub fn dim(&self) -> usize {
        match self {
            ConvexSet::FullSpace(n) | ConvexSet::NonnegativeOrthant(n) => *n,
            ConvexSet::Box { lower, .. } => lower.len(),
            ConvexSet::Halfspace { normal, .. } => normal.len(),
            ConvexSet::Point(c) => c.len(),
        }
    }

    /// Checks the structural invariants of the variant.
    ///
    /// # Errors
    ///
    /// `InvalidArgument` for an empty box (`lower > upper` somewhere), a
    /// zero halfspace normal, mismatched bound lengths, or dimension zero.
    pub fn validate(&self) -> Result<()> {
        if self.dim() == 0 {
            return Err(Error::invalid("K", "ambient dimension must be ≥ 1"));
        }
        match self {
            ConvexSet::Box { lower, upper } => {
                if lower.len() != upper.len() {
                    return Err(Error::invalid(
                        "K",
                        format!(
                            "box bound lengths differ: {} vs {}",
                            lower.len(),
                            upper.len()
                        ),
                    ));
                }
                for i in 0..lower.len() {
                    if !(lower[i] <= upper[i]) {
                        return Err(Error::invalid(
                            "K",
                            format!(
                                "box is empty in coordinate {i}: lower {} > upper {}",
                                lower[i], upper[i]
                            ),
                        ));
                    }
                    if lower[i] == f64::INFINITY || upper[i] == f64::NEG_INFINITY {
                        return Err(Error::invalid(
                            "K",
                            format!("box bounds in coordinate {i} leave it empty"),
                        ));
                    }
                }
                Ok(())
            }
            ConvexSet::Halfspace { normal, .. } => {
                if normal.norm() == 0.0 {
                    Err(Error::invalid("K", "halfspace normal must be nonzero"))
                } else {
                    Ok(())
                }
            }
            _ => Ok(()),
        }
    }

    /// Membership test with absolute tolerance `tol`.
    pub fn contains(&self, x: &DVector<f64>, tol: f64) -> bool {
        match self {
            ConvexSet::FullSpace(_) => true,
            ConvexSet::Box { lower, upper } => (0..x.len())
                .all(|i| x[i] >= lower[i] - tol && x[i] <= upper[i] + tol),
            ConvexSet::NonnegativeOrthant(_) => x.iter().all(|&v| v >= -tol),
            ConvexSet::Halfspace { normal, offset } => normal.dot(x) <= offset + tol,
            ConvexSet::Point(c) => (x - c).amax() <= tol,
        }
    }
}

// ======================================================================
// Constraint specification and feasibility
// ======================================================================

/// The full terminal constraint: pointwise set `K`, affine pair `(α, β)`,
/// and which of the two constraints are active.
#[derive(Debug, Clone)]
pub struct ConstraintSpec {
    /// The pointwise constraint set.
    pub k: ConvexSet,
    /// The affine constraint direction.
    pub alpha: DVector<f64>,
    /// The affine constraint level: `⟨α, 𝔼ξ⟩ ≥ β`.
    pub beta: f64,
    /// Whether the pointwise constraint is imposed.
    pub pointwise_enabled: bool,
    /// Whether the affine expectation constraint is imposed.
    pub affine_enabled: bool,
}

impl ConstraintSpec {
    /// Checks structural invariants: the set validates, dimensions agree,
    /// and `α ≠ 0` whenever the affine constraint is enabled.
    pub fn validate(&self) -> Result<()> {
        self.k.validate()?;
        if self.alpha.len() != self.k.dim() {
            return Err(Error::DimensionMismatch {
                context: format!(
                    "alpha has length {}, K lives in dimension {}",
                    self.alpha.len(),
                    self.k.dim()
                ),
            });
        }
        if self.affine_enabled && self.alpha.norm() == 0.0 {
            return Err(Error::invalid(
                "alpha",
                "must be nonzero when the affine constraint is enabled",
            ));
        }
        Ok(())
    }
}

/// Classification of the constraint pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum FeasibilityClass {
    /// Positive breadth and `−h*(−α) < β < h*(α)`: both constraints bite.
    NontrivialBoth,
    /// The affine constraint is implied by (or reduces to) the pointwise one.
    PointwiseOnly,
    /// No admissible terminal control exists.
    Empty,
    /// `β = h*(α)` with positive breadth: feasibility concentrates on an
    /// exposed face of `K` (reported, not constructed).
    ExposedFace,
    /// `⟨α, ·⟩` is constant on `K` (zero breadth); `reduces_to` tells
    /// whether that constant satisfies the affine constraint.
    DegeneratedBreadth,
}

/// Verdict of [`classify_feasibility`].
#[derive(Debug, Clone, Serialize)]
pub struct FeasibilityVerdict {
    /// The case-table classification.
    pub class: FeasibilityClass,
    /// For `DegeneratedBreadth`, the effective class (`PointwiseOnly` or
    /// `Empty`); `None` otherwise.
    pub reduces_to: Option<FeasibilityClass>,
    /// `h*_K(α)`.
    pub support_plus: ExtendedReal,
    /// `h*_K(−α)`.
    pub support_minus: ExtendedReal,
    /// Breadth `h*_K(α) + h*_K(−α) ≥ 0`.
    pub breadth: ExtendedReal,
    /// Strict two-sided feasibility `−h*(−α) < β < h*(α)`.
    pub condition_f: bool,
    /// Slater condition `β < h*(α)`.
    pub slater: bool,
}

/// Support functional `h*_K(p) = sup_{x∈K} ⟨p, x⟩` as an extended real.
///
/// Finite exactly when `p` lies in the barrier cone of `K`.
pub fn support_fn(k: &ConvexSet, p: &DVector<f64>) -> ExtendedReal {
    let value = match k {
        ConvexSet::FullSpace(_) => {
            if p.iter().all(|&x| x == 0.0) {
                0.0
            } else {
                f64::INFINITY
            }
        }
        ConvexSet::Box { lower, upper } => {
            let mut acc = 0.0;
            for i in 0..p.len() {
                // sup over x_i ∈ [l_i, u_i] of p_i x_i; coordinates with
                // p_i = 0 contribute 0 even for unbounded intervals.
                if p[i] > 0.0 {
                    acc += p[i] * upper[i];
                } else if p[i] < 0.0 {
                    acc += p[i] * lower[i];
                }
                if acc == f64::INFINITY {
                    return ExtendedReal::PlusInfinity;
                }
            }
            acc
        }
        ConvexSet::NonnegativeOrthant(_) => {
            if p.iter().any(|&x| x > 0.0) {
                f64::INFINITY
            } else {
                0.0
            }
        }
        ConvexSet::Halfspace { normal, offset } => {
            // Finite only along nonnegative multiples of the normal:
            // p = t·normal with t ≥ 0 gives sup = t·offset.
            let t = p.dot(normal) / normal.norm_squared();
            let residual = p - normal * t;
            if residual.amax() > 1e-12 * p.amax().max(1.0) || t < 0.0 {
                f64::INFINITY
            } else {
                t * offset
            }
        }
        ConvexSet::Point(c) => p.dot(c),
    };
    ExtendedReal::from_f64(value)
}

/// Classifies the feasibility of an affine-constrained spec by the case
/// table in the module docs.
///
/// # Errors
///
/// `InvalidArgument` if the affine constraint is disabled or `α = 0`.
pub fn classify_feasibility(spec: &ConstraintSpec) -> Result<FeasibilityVerdict> {
    spec.validate()?;
    if !spec.affine_enabled {
        return Err(Error::invalid(
            "spec",
            "classification requires the affine constraint to be enabled",
        ));
    }
    let hp = support_fn(&spec.k, &spec.alpha);
    let hm = support_fn(&spec.k, &(-&spec.alpha));
    let breadth = hp.add(hm);
    let beta = spec.beta;
    let condition_f = -hm.as_f64() < beta && beta < hp.as_f64();
    let slater = beta < hp.as_f64();

    let (class, reduces_to) = if breadth.as_f64() > 0.0 {
        if beta > hp.as_f64() {
            (FeasibilityClass::Empty, None)
        } else if beta == hp.as_f64() {
            (FeasibilityClass::ExposedFace, None)
        } else if beta <= -hm.as_f64() {
            (FeasibilityClass::PointwiseOnly, None)
        } else {
            (FeasibilityClass::NontrivialBoth, None)
        }
    } else {
        // ⟨α, ·⟩ is constant on K, equal to h*(α) = −h*(−α).
        let effective = if beta <= hp.as_f64() {
            FeasibilityClass::PointwiseOnly
        } else {
            FeasibilityClass::Empty
        };
        (FeasibilityClass::DegeneratedBreadth, Some(effective))
    };

    Ok(FeasibilityVerdict {
        class,
        reduces_to,
        support_plus: hp,
        support_minus: hm,
        breadth,
        condition_f,
        slater,
    })
}

// ======================================================================
// Projection
// ======================================================================

/// Projects `x` onto `K` in the `G₁`-metric:
/// `argmin_{y∈K} ⟨G₁(y−x), y−x⟩`.
///
/// Diagonal metrics project boxes and orthants componentwise (exact clamp);
/// non-diagonal metrics use exhaustive active-set enumeration over the box
/// faces (dimension capped at 8).  Halfspaces and points have closed forms
/// for every metric.
///
/// # Errors
///
/// `InvalidArgument` if `G₁` is not symmetric positive definite or shapes
/// disagree; `InstanceTooLarge` past the enumeration cap.
pub fn project(k: &ConvexSet, x: &DVector<f64>, g1: &DMatrix<f64>) -> Result<DVector<f64>> {
    k.validate()?;
    let n = k.dim();
    if x.len() != n {
        return Err(Error::DimensionMismatch {
            context: format!("point has length {}, K lives in dimension {n}", x.len()),
        });
    }
    if g1.nrows() != n || g1.ncols() != n {
        return Err(Error::DimensionMismatch {
            context: format!("G₁ is {}×{}, expected {n}×{n}", g1.nrows(), g1.ncols()),
        });
    }
    if (g1 - g1.transpose()).amax() > 1e-12 * g1.amax().max(1.0) {
        return Err(Error::invalid("G1", "metric must be symmetric"));
    }
    if g1.clone().cholesky().is_none() {
        return Err(Error::invalid("G1", "metric must be positive definite"));
    }

    match k {
        ConvexSet::FullSpace(_) => Ok(x.clone()),
        ConvexSet::Point(c) => Ok(c.clone()),
        ConvexSet::Halfspace { normal, offset } => {
            // Closed form: move along G₁⁻¹ normal just enough to reach the
            // boundary when outside.
            let violation = normal.dot(x) - offset;
            if violation <= 0.0 {
                return Ok(x.clone());
            }
            let ginv_a = g1
                .clone()
                .cholesky()
                .expect("checked positive definite above")
                .solve(normal);
            let step = violation / normal.dot(&ginv_a);
            Ok(x - ginv_a * step)
        }
        ConvexSet::NonnegativeOrthant(_) => {
            let lower = DVector::zeros(n);
            let upper = DVector::from_element(n, f64::INFINITY);
            project_box(&lower, &upper, x, g1)
        }
        ConvexSet::Box { lower, upper } => project_box(lower, upper, x, g1),
    }
}

/// Box projection: componentwise clamp for diagonal metrics, active-set
/// enumeration otherwise.
fn project_box(
    lower: &DVector<f64>,
    upper: &DVector<f64>,
    x: &DVector<f64>,
    g1: &DMatrix<f64>,
) -> Result<DVector<f64>> {
    let n = x.len();
    let mut off_diag = 0.0f64;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                off_diag = off_diag.max(g1[(i, j)].abs());
            }
        }
    }
    if off_diag == 0.0 {
        // Diagonal metric: the objective separates; clamp each coordinate.
        let mut y = x.clone();
        for i in 0..n {
            y[i] = y[i].clamp(lower[i], upper[i]);
        }
        return Ok(y);
    }

    if n > ACTIVE_SET_DIM_CAP {
        return Err(Error::InstanceTooLarge {
            context: format!(
                "box projection under a non-diagonal metric enumerates 3ⁿ active sets; \
                 n = {n} exceeds the cap {ACTIVE_SET_DIM_CAP}"
            ),
        });
    }

    // Enumerate every assignment of {free, at-lower, at-upper} per
    // coordinate, solve the equality-constrained quadratic for the free
    // block, and keep the best feasible candidate.
    let mut best: Option<(f64, DVector<f64>)> = None;
    let mut assignment = vec![0u8; n]; // 0 free, 1 lower, 2 upper
    'outer: loop {
        // Skip assignments pinning a coordinate to an infinite bound.
        let pin_ok = (0..n).all(|i| match assignment[i] {
            1 => lower[i].is_finite(),
            2 => upper[i].is_finite(),
            _ => true,
        });
        if pin_ok {
            if let Some(y) = solve_pinned(lower, upper, x, g1, &assignment) {
                let feasible = (0..n)
                    .all(|i| y[i] >= lower[i] - PROJECTION_TOL && y[i] <= upper[i] + PROJECTION_TOL);
                if feasible {
                    let d = &y - x;
                    let obj = (g1 * &d).dot(&d);
                    if best.as_ref().is_none_or(|(b, _)| obj < *b) {
                        best = Some((obj, y));
                    }
                }
            }
        }
        // Next assignment in base-3.
        for i in 0..n {
            assignment[i] += 1;
            if assignment[i] < 3 {
                continue 'outer;
            }
            assignment[i] = 0;
        }
        break;
    }
    match best {
        Some((_, mut y)) => {
            // Snap to the bounds we are within tolerance of, so idempotence
            // is exact.
            for i in 0..n {
                if (y[i] - lower[i]).abs() <= PROJECTION_TOL {
                    y[i] = lower[i];
                }
                if (y[i] - upper[i]).abs() <= PROJECTION_TOL {
                    y[i] = upper[i];
                }
            }
            Ok(y)
        }
        None => Err(Error::RepresentationFailure {
            context: "active-set enumeration found no feasible candidate".into(),
        }),
    }
}

/// Solves the equality-pinned quadratic subproblem of one active set.
fn solve_pinned(
    lower: &DVector<f64>,
    upper: &DVector<f64>,
    x: &DVector<f64>,
    g1: &DMatrix<f64>,
    assignment: &[u8],
) -> Option<DVector<f64>> {
    let n = x.len();
    let free: Vec<usize> = (0..n).filter(|&i| assignment[i] == 0).collect();
    let mut y = DVector::zeros(n);
    for i in 0..n {
        y[i] = match assignment[i] {
            1 => lower[i],
            2 => upper[i],
            _ => 0.0,
        };
    }
    if free.is_empty() {
        return Some(y);
    }
    // Minimize ½(y−x)ᵀG(y−x) over the free block:
    //   G_FF (y_F − x_F) + G_FP (y_P − x_P) = 0.
    let nf = free.len();
    let mut g_ff = DMatrix::zeros(nf, nf);
    let mut rhs = DVector::zeros(nf);
    for (a, &i) in free.iter().enumerate() {
        for (b, &j) in free.iter().enumerate() {
            g_ff[(a, b)] = g1[(i, j)];
        }
        let mut acc = 0.0;
        for j in 0..n {
            if assignment[j] != 0 {
                acc += g1[(i, j)] * (y[j] - x[j]);
            }
        }
        rhs[a] = -acc;
    }
    let delta = g_ff.lu().solve(&rhs)?;
    for (a, &i) in free.iter().enumerate() {
        y[i] = x[i] + delta[a];
    }
    Some(y)
}

/// Checks that the weighted mean of the samples lies in `K`.
///
/// Whenever every sample lies in `K`, convexity puts the mean in `K` too;
/// the check is used to validate sampled terminal controls.
///
/// # Errors
///
/// `InvalidArgument` for negative weights or weights not summing to 1.
pub fn mean_membership_check(
    samples: &[DVector<f64>],
    weights: &[f64],
    k: &ConvexSet,
) -> Result<bool> {
    if samples.is_empty() || samples.len() != weights.len() {
        return Err(Error::invalid(
            "samples",
            "need equally many samples and weights, at least one each",
        ));
    }
    if weights.iter().any(|&w| w < 0.0) {
        return Err(Error::invalid("weights", "must be nonnegative"));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > 1e-12 {
        return Err(Error::invalid(
            "weights",
            format!("must sum to 1, got {total}"),
        ));
    }
    let mut mean = DVector::zeros(samples[0].len());
    for (s, &w) in samples.iter().zip(weights) {
        mean += s * w;
    }
    Ok(k.contains(&mean, MEMBERSHIP_TOL))
}

/// Convenience constructor for a scalar interval `[lo, hi]`.
pub fn interval(lo: f64, hi: f64) -> ConvexSet {
    ConvexSet::Box {
        lower: DVector::from_element(1, lo),
        upper: DVector::from_element(1, hi),
    }
}

// ======================================================================
// Tests
// ======================================================================
