//! Run reports and trajectory tables.
//!
//! Every command writes a `report.json` into the output directory: the
//! config digest, what ran, the certificates and diagnostics that were
//! computed, the costs and residuals, the wall-clock time, and a manifest
//! of every file written.  Apart from `wall_clock_ms`, every number in the
//! report is a pure function of the resolved config (hence of its digest)
//! and the seed inside it — re-running the echoed config reproduces the
//! report bitwise.
//!
//! Solve runs additionally write `trajectories.csv`: one row per time node,
//! and per path component one `mean` and one `std` column, reduced across
//! scenarios with a fixed pairwise summation order so the output is
//! deterministic.  The header row carries the unit of each column in
//! square brackets (`time`, `state`, `costate`, `control`).  Raw
//! per-scenario dumps (`scenarios.csv`) stay behind the config's
//! `output.raw_scenarios` flag.

use serde::Serialize;
use stackelberg_bsde::bfsde::{PicardTrace, WellposednessCertificate};
use stackelberg_bsde::core::{TimeGrid, VectorPath};
use stackelberg_bsde::leader::{Branch, KktBranchDiagnostics, KktVerification};
use stackelberg_bsde::oracle::ComparisonReport;
use stackelberg_bsde::riccati::ConvexityCertificate;
use stackelberg_bsde::Error;

/// Schema tag written into every report.
pub const REPORT_SCHEMA: &str = "stackelberg-run-report v1";

// ======================================================================
// Report structure
// ======================================================================

/// The complete `report.json` payload.
#[derive(Debug, Serialize)]
pub struct RunReport {
    /// Fixed schema tag ([`REPORT_SCHEMA`]).
    pub schema: String,
    /// Which subcommand produced the report.
    pub command: String,
    /// FNV-1a digest of the resolved config (`fnv1a64:…`).
    pub config_digest: String,
    /// The solver route that ran (config `solver.kind`).
    pub solver: String,
    /// Ensemble seed (0 for a degenerate ensemble).
    pub seed: u64,
    /// Scenario count.
    pub scenarios: usize,
    /// Horizon `T`.
    pub horizon: f64,
    /// Grid steps `N`.
    pub steps: usize,
    /// Whether the wellposedness gate was overridden.
    pub override_certificate: bool,
    /// Largest asymmetry drift symmetrised away during config building.
    pub symmetrization_max: f64,
    /// Wall-clock runtime in milliseconds.  The one field exempt from the
    /// reproducibility contract.
    pub wall_clock_ms: f64,
    /// `"ok"` or `"error"`.
    pub outcome: String,
    /// The failure, when `outcome = "error"` (the report is still written).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<ErrorReport>,
    /// Equilibrium summary (leader routes).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub equilibrium: Option<EquilibriumReport>,
    /// Follower-only summary (`blq` route).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub follower: Option<FollowerReport>,
    /// Certificate suite (`certify` command).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub certificates: Option<CertificateReport>,
    /// Oracle comparison (`oracle-compare` command).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub comparison: Option<ComparisonSection>,
    /// Every file this run wrote, relative to the output directory.
    pub files: Vec<String>,
}

/// A failure echoed into the report before exiting with status 3.
#[derive(Debug, Serialize)]
pub struct ErrorReport {
    /// Machine-readable class (the library error variant name, or
    /// `"schema"` for late schema failures).
    pub class: String,
    /// Human-readable message.
    pub message: String,
}

/// The library error variant name, stable for scripting.
pub fn error_class(e: &Error) -> &'static str {
    match e {
        Error::InvalidArgument { .. } => "InvalidArgument",
        Error::NumericalBlowup { .. } => "NumericalBlowup",
        Error::ConstraintViolation { .. } => "ConstraintViolation",
        Error::NotConvex { .. } => "NotConvex",
        Error::NoConvergence { .. } => "NoConvergence",
        Error::IllConditionedRegression { .. } => "IllConditionedRegression",
        Error::KktIndeterminate { .. } => "KktIndeterminate",
        Error::KktBracketFailure { .. } => "KktBracketFailure",
        Error::RepresentationFailure { .. } => "RepresentationFailure",
        Error::InstanceTooLarge { .. } => "InstanceTooLarge",
        Error::CertificateRefused { .. } => "CertificateRefused",
        Error::DimensionMismatch { .. } => "DimensionMismatch",
    }
}

/// Equilibrium summary for the leader routes (`p1`, `p2`, `general`).
#[derive(Debug, Serialize)]
pub struct EquilibriumReport {
    /// Which multiplier branch produced the solution.
    pub branch: Branch,
    /// KKT multiplier of the affine constraint.
    pub lambda: f64,
    /// Leader cost at the equilibrium.
    pub j1: f64,
    /// Follower cost at the equilibrium.
    pub j2: f64,
    /// Mean terminal choice `𝔼ξ̄`.
    pub xi_mean: Vec<f64>,
    /// Sup over nodes and scenarios of `‖R₂₂ū₂ − B₂ᵀȲ‖` (follower
    /// stationarity, recomputed from the returned paths).
    pub stationarity_residual: f64,
    /// Full KKT verification at the config's KKT tolerance.
    pub kkt: KktVerification,
    /// Branch diagnostics when the multiplier logic recorded them.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub branch_diagnostics: Option<KktBranchDiagnostics>,
    /// Picard convergence trace when a fixed-point route ran.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub picard: Option<PicardTrace>,
    /// Sign-change brackets of the multiplier root search (general route).
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub phi_sign_changes: Vec<(f64, f64)>,
}

/// Follower-only summary for the `blq` route.
#[derive(Debug, Serialize)]
pub struct FollowerReport {
    /// Follower cost at the best response.
    pub j2: f64,
    /// Sup-norm stationarity residual reported by the solver.
    pub stationarity_residual: f64,
    /// Mean initial state `𝔼X̄(0)`.
    pub x0_mean: Vec<f64>,
}

/// One certificate slot: either the certificate or why it was unavailable.
#[derive(Debug, Serialize)]
pub struct CertificateOutcome<T: Serialize> {
    /// The certificate, when it could be evaluated.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub value: Option<T>,
    /// The error message, when it could not.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl<T: Serialize> CertificateOutcome<T> {
    /// Wraps a certificate evaluation result.
    pub fn from_result(r: Result<T, Error>) -> Self {
        match r {
            Ok(value) => CertificateOutcome {
                value: Some(value),
                error: None,
            },
            Err(e) => CertificateOutcome {
                value: None,
                error: Some(e.to_string()),
            },
        }
    }
}

/// The `certify` command's payload: every computable certificate.
#[derive(Debug, Serialize)]
pub struct CertificateReport {
    /// Follower convexity: `P(0) + H₂ ⪰ 0` read off the follower Riccati
    /// solution.
    pub follower_convexity: CertificateOutcome<ConvexityCertificate>,
    /// Leader convexity: the analogous check on the leader's equation.
    pub leader_convexity: CertificateOutcome<ConvexityCertificate>,
    /// Discounting criterion with constants extracted from the raw
    /// coefficients.
    pub wellposedness_general: CertificateOutcome<WellposednessCertificate>,
    /// The leader-stack variant (`ρ* < −4·sup‖C‖²`) on the coefficients.
    pub wellposedness_leader_stack: CertificateOutcome<WellposednessCertificate>,
    /// The follower-stack variant (`ρ* < −2·sup‖C‖²`) on the coefficients.
    pub wellposedness_follower_stack: CertificateOutcome<WellposednessCertificate>,
    /// The exact gate the fixed-point routes apply: the discounting
    /// criterion on the assembled leader optimality system.
    pub fixed_point_gate: CertificateOutcome<WellposednessCertificate>,
    /// Instance-independent reference: the explicit small-gain bound at its
    /// worked constants, reporting `θ` and the three loop gains.
    pub worked_reference: CertificateOutcome<WellposednessCertificate>,
}

/// Oracle comparison payload.
#[derive(Debug, Serialize)]
pub struct ComparisonSection {
    /// Continuous-vs-oracle gaps and the verdict (leader routes).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub leader: Option<ComparisonReport>,
    /// Follower-route comparison (`blq` vs the exact discrete QP).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub follower: Option<FollowerComparison>,
    /// Oracle-side KKT residual (diagnostic for the oracle itself).
    pub oracle_kkt_residual: f64,
}

/// Gaps between the continuous follower response and the discrete QP.
#[derive(Debug, Serialize)]
pub struct FollowerComparison {
    /// Relative follower-cost gap.
    pub j2_gap: f64,
    /// Sup-norm gap of the mean follower control at the left step nodes.
    pub u2_gap: f64,
    /// The tolerance the verdict was taken against.
    pub tolerance: f64,
    /// `true` when the cost gap is within tolerance.
    pub within: bool,
}

impl RunReport {
    /// Serialises the report as pretty JSON (with a trailing newline).
    pub fn to_json(&self) -> String {
        let mut text = serde_json::to_string_pretty(self)
            .expect("report serialisation cannot fail: all fields are plain data");
        text.push('\n');
        text
    }
}

// ======================================================================
// Deterministic statistics
// ======================================================================

/// Pairwise (cascade) summation: a fixed reduction tree, independent of
/// evaluation order, so ensemble statistics are bitwise reproducible.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    match values.len() {
        0 => 0.0,
        1 => values[0],
        2 => values[0] + values[1],
        n => {
            let mid = n / 2;
            pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
        }
    }
}

/// Mean and population standard deviation across scenarios of one component
/// at one node, reduced pairwise.
fn component_stats(path: &VectorPath, node: usize, comp: usize, buf: &mut Vec<f64>) -> (f64, f64) {
    let m = path.scenarios;
    buf.clear();
    for s in 0..m {
        buf.push(path.node(s, node)[comp]);
    }
    let mean = pairwise_sum(buf) / m as f64;
    for v in buf.iter_mut() {
        let d = *v - mean;
        *v = d * d;
    }
    let var = pairwise_sum(buf) / m as f64;
    (mean, var.max(0.0).sqrt())
}

// ======================================================================
// CSV writers
// ======================================================================

/// One named series for the trajectory table.
pub struct Series<'a> {
    /// Column-name stem (`xbar`, `u1`, …).
    pub name: &'a str,
    /// Unit tag written into the header (`state`, `costate`, `control`).
    pub unit: &'a str,
    /// The path (components are numbered from 1 in the header).
    pub path: &'a VectorPath,
}

/// Renders `trajectories.csv`: header with units, one row per node, one
/// `mean` and one `std` column per component of every series.
pub fn trajectory_csv(grid: &TimeGrid, series: &[Series<'_>]) -> String {
    let mut header = vec!["t[time]".to_string()];
    for s in series {
        for comp in 1..=s.path.dim {
            header.push(format!("{}_{}_mean[{}]", s.name, comp, s.unit));
            header.push(format!("{}_{}_std[{}]", s.name, comp, s.unit));
        }
    }
    let mut out = header.join(",");
    out.push('\n');

    let mut buf = Vec::new();
    for k in 0..grid.len() {
        let mut row = vec![format!("{:e}", grid.nodes[k])];
        for s in series {
            for comp in 0..s.path.dim {
                let (mean, std) = component_stats(s.path, k, comp, &mut buf);
                row.push(format!("{mean:e}"));
                row.push(format!("{std:e}"));
            }
        }
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

/// Renders `scenarios.csv`: the raw dump, one column per scenario and
/// component (`name_comp_s{j}`), one row per node.
pub fn raw_scenario_csv(grid: &TimeGrid, series: &[Series<'_>]) -> String {
    let mut header = vec!["t[time]".to_string()];
    for s in series {
        for comp in 1..=s.path.dim {
            for j in 0..s.path.scenarios {
                header.push(format!("{}_{}_s{}[{}]", s.name, comp, j, s.unit));
            }
        }
    }
    let mut out = header.join(",");
    out.push('\n');

    for k in 0..grid.len() {
        let mut row = vec![format!("{:e}", grid.nodes[k])];
        for s in series {
            for comp in 0..s.path.dim {
                for j in 0..s.path.scenarios {
                    row.push(format!("{:e}", s.path.node(j, k)[comp]));
                }
            }
        }
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

// ======================================================================
// Tests
// ======================================================================
