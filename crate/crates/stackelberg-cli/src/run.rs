//! Command execution: one config in, one output directory out.
//!
//! Every command follows the same stages:
//!
//! 1. apply flag overrides, digest the resolved config;
//! 2. validate and build the library inputs — any failure here exits 2
//!    with nothing written;
//! 3. create the output directory and echo `resolved-config.toml` (the
//!    file that reproduces the run);
//! 4. run the numerics — any failure here still writes `report.json`,
//!    with the error class and message, and exits 3;
//! 5. write `report.json`, `trajectories.csv` (solve routes), and
//!    optionally `scenarios.csv`.
//!
//! The `certify` command never fails on a *false* certificate: its product
//! is the report, and a sufficient criterion refusing an instance is a
//! finding, not an error.  The `oracle-compare` command does fail (exit 3)
//! when the continuous solution disagrees with the oracle beyond the
//! configured tolerance — that is the point of running it.

use std::fs;
use std::path::PathBuf;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use stackelberg_bsde::bfsde::{
    certify, leader_fixed_point_system, CertifyInput, CertifyVariant, H5Constants,
};
use stackelberg_bsde::constraints::ConvexSet;
use stackelberg_bsde::follower::{solve_blq, FollowerSolution, GameCoefficients, TerminalControl};
use stackelberg_bsde::leader::{
    solve_p1_pointwise, solve_p2_affine, solve_p_general, verify_kkt, EquilibriumSolution,
    PicardOptions,
};
use stackelberg_bsde::oracle::{
    compare, oracle_follower, oracle_leader, DiscreteGame, ORACLE_MAX_STEPS,
};
use stackelberg_bsde::riccati::{
    follower_convexity_certificate, leader_convexity_certificate, solve_sre1, solve_sre2,
};

use crate::config::{BuiltProblem, Overrides, ProblemConfig, SolverKind};
use crate::report::{
    error_class, raw_scenario_csv, trajectory_csv, CertificateOutcome, CertificateReport,
    ComparisonSection, EquilibriumReport, ErrorReport, FollowerComparison, FollowerReport,
    RunReport, Series, REPORT_SCHEMA,
};

/// What the process is being asked to do (subcommand, minus flag plumbing).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Action {
    /// Run the config's solver route.
    Solve,
    /// Evaluate every certificate, no solve.
    Certify,
    /// Solve and verify against the discrete oracle.
    OracleCompare,
}

/// A failed run, classified by exit status.
#[derive(Debug)]
pub enum Failure {
    /// The config cannot describe a well-formed problem — exit 2, nothing
    /// written.
    Schema(String),
    /// The numerics failed or a verification did not hold — exit 3, the
    /// diagnostic report is on disk.
    Solver {
        /// Machine-readable class (library error variant name).
        class: String,
        /// Human-readable message.
        message: String,
    },
    /// The filesystem got in the way — exit 1.
    Io(String),
}

impl Failure {
    /// Process exit status for this failure.
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Schema(_) => 2,
            Failure::Solver { .. } => 3,
            Failure::Io(_) => 1,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Schema(msg) => write!(f, "config error: {msg}"),
            Failure::Solver { class, message } => write!(f, "{class}: {message}"),
            Failure::Io(msg) => write!(f, "io error: {msg}"),
        }
    }
}

/// Runs one command against one (already loaded) config.
///
/// `command_name` is echoed into the report (`finance-demo` runs reuse the
/// solve path but keep their own name).
///
/// # Errors
///
/// [`Failure`] classified for the exit status; see the module docs for
/// which stage writes what.
pub fn run(
    action: Action,
    command_name: &'static str,
    mut config: ProblemConfig,
    overrides: &Overrides,
) -> Result<(), Failure> {
    config.apply_overrides(overrides);
    let digest = config.digest().map_err(|e| Failure::Schema(e.0))?;
    let built = config.build().map_err(|e| Failure::Schema(e.0))?;

    // `solve` honours the config's route selection, including the two
    // non-solver modes.
    let action = match (action, config.solver.kind) {
        (Action::Solve, SolverKind::Certify) => Action::Certify,
        (Action::Solve, SolverKind::Oracle) => Action::OracleCompare,
        (a, _) => a,
    };
    validate_route(action, &config, &built)?;

    let runner = Runner::new(command_name, &config, &built, digest)?;
    match action {
        Action::Solve => runner.solve(),
        Action::Certify => runner.certify(),
        Action::OracleCompare => runner.oracle_compare(),
    }
}

/// Route/constraint consistency checks that belong to the schema stage:
/// they are properties of the config alone, so they fail with exit 2
/// before anything is written.
fn validate_route(
    action: Action,
    config: &ProblemConfig,
    built: &BuiltProblem,
) -> Result<(), Failure> {
    let kind = config.solver.kind;
    let spec = &built.spec;
    let route_err = |msg: String| Err(Failure::Schema(msg));

    if action != Action::Certify {
        match kind {
            SolverKind::P1 if !(spec.pointwise_enabled && !spec.affine_enabled) => {
                return route_err(
                    "solver.kind = 'p1' needs constraint.pointwise = true and \
                     constraint.affine = false"
                        .to_string(),
                );
            }
            SolverKind::P2 if !(spec.affine_enabled && !spec.pointwise_enabled) => {
                return route_err(
                    "solver.kind = 'p2' needs constraint.affine = true and \
                     constraint.pointwise = false"
                        .to_string(),
                );
            }
            SolverKind::General if !(spec.pointwise_enabled && spec.affine_enabled) => {
                return route_err(
                    "solver.kind = 'general' needs both constraint.pointwise and \
                     constraint.affine enabled"
                        .to_string(),
                );
            }
            _ => {}
        }
    }

    if action == Action::OracleCompare {
        if kind == SolverKind::Certify {
            return route_err(
                "solver.kind = 'certify' has nothing to compare; pick a solver route".to_string(),
            );
        }
        if kind == SolverKind::Oracle
            && !spec.pointwise_enabled
            && !spec.affine_enabled
        {
            return route_err(
                "solver.kind = 'oracle' needs at least one constraint enabled to infer the \
                 continuous route (p1, p2, or general)"
                    .to_string(),
            );
        }
        if !built.coeffs.c_is_zero() {
            return route_err(
                "the discrete oracle covers deterministic instances: the diffusion feedback C \
                 must vanish identically for an oracle comparison"
                    .to_string(),
            );
        }
        if built.grid.steps > ORACLE_MAX_STEPS {
            return route_err(format!(
                "the oracle's active-set enumeration is capped at {ORACLE_MAX_STEPS} steps, \
                 got {}",
                built.grid.steps
            ));
        }
        let stochastic_route = matches!(
            continuous_route(config, built),
            Ok(SolverKind::P1 | SolverKind::General)
        );
        if stochastic_route && !config.ensemble.degenerate {
            return route_err(
                "oracle comparisons reduce the fixed-point routes to deterministic dynamics; \
                 set ensemble.degenerate = true (or omit the [ensemble] table)"
                    .to_string(),
            );
        }
        if kind == SolverKind::Blq {
            if let Some((xi, _)) = &built.blq_inputs {
                if !matches!(xi, TerminalControl::Deterministic(_)) {
                    return route_err(
                        "the follower oracle takes a deterministic terminal target; drop \
                         solver.xi_noise for an oracle comparison"
                            .to_string(),
                    );
                }
            }
        }
    }
    Ok(())
}

/// The continuous route an oracle comparison solves.
fn continuous_route(config: &ProblemConfig, built: &BuiltProblem) -> Result<SolverKind, Failure> {
    match config.solver.kind {
        k @ (SolverKind::Blq | SolverKind::P1 | SolverKind::P2 | SolverKind::General) => Ok(k),
        SolverKind::Oracle => match (built.spec.pointwise_enabled, built.spec.affine_enabled) {
            (true, true) => Ok(SolverKind::General),
            (false, true) => Ok(SolverKind::P2),
            (true, false) => Ok(SolverKind::P1),
            (false, false) => Err(Failure::Schema(
                "no constraint enabled; cannot infer a continuous route".to_string(),
            )),
        },
        SolverKind::Certify => Err(Failure::Schema(
            "solver.kind = 'certify' has nothing to compare".to_string(),
        )),
    }
}

// ======================================================================
// Runner
// ======================================================================

/// One run: the output directory, the growing file manifest, the clock.
struct Runner<'a> {
    config: &'a ProblemConfig,
    built: &'a BuiltProblem,
    dir: PathBuf,
    files: Vec<String>,
    started: Instant,
    report: RunReport,
}

impl<'a> Runner<'a> {
    /// Creates the output directory and echoes the resolved config.
    fn new(
        command: &'static str,
        config: &'a ProblemConfig,
        built: &'a BuiltProblem,
        digest: String,
    ) -> Result<Self, Failure> {
        let dir = PathBuf::from(&config.output.directory);
        fs::create_dir_all(&dir).map_err(|e| {
            Failure::Io(format!("cannot create output directory {}: {e}", dir.display()))
        })?;

        let report = RunReport {
            schema: REPORT_SCHEMA.to_string(),
            command: command.to_string(),
            config_digest: digest,
            solver: config.solver.kind.name().to_string(),
            seed: built.ensemble.seed,
            scenarios: built.ensemble.paths,
            horizon: built.grid.horizon,
            steps: built.grid.steps,
            override_certificate: config.solver.override_certificate,
            symmetrization_max: built.symmetrization_max,
            wall_clock_ms: 0.0,
            outcome: "ok".to_string(),
            error: None,
            equilibrium: None,
            follower: None,
            certificates: None,
            comparison: None,
            files: Vec::new(),
        };

        let mut runner = Runner {
            config,
            built,
            dir,
            files: Vec::new(),
            started: Instant::now(),
            report,
        };
        let echo = config.to_toml().map_err(|e| Failure::Schema(e.0))?;
        runner.write_file("resolved-config.toml", &echo)?;
        Ok(runner)
    }

    /// Writes one output file and records it in the manifest.
    fn write_file(&mut self, name: &str, contents: &str) -> Result<(), Failure> {
        fs::write(self.dir.join(name), contents)
            .map_err(|e| Failure::Io(format!("cannot write {name}: {e}")))?;
        self.files.push(name.to_string());
        Ok(())
    }

    /// Writes the final report with outcome `ok` and prints the summary.
    fn finish_ok(mut self, summary: &str) -> Result<(), Failure> {
        self.seal_report()?;
        println!("{summary}");
        println!("wrote {} file(s) to {}", self.files.len(), self.dir.display());
        Ok(())
    }

    /// Writes the diagnostic report for a failed run, then returns the
    /// failure (exit 3).
    fn finish_err(mut self, class: String, message: String) -> Failure {
        self.report.outcome = "error".to_string();
        self.report.error = Some(ErrorReport {
            class: class.clone(),
            message: message.clone(),
        });
        // Report-writing trouble must not mask the solver failure.
        if let Err(io) = self.seal_report() {
            eprintln!("stackelberg: while writing the failure report: {io}");
        }
        Failure::Solver { class, message }
    }

    /// Stamps the clock and manifest and writes `report.json`.
    fn seal_report(&mut self) -> Result<(), Failure> {
        self.report.wall_clock_ms = self.started.elapsed().as_secs_f64() * 1e3;
        let mut files = self.files.clone();
        files.push("report.json".to_string());
        self.report.files = files;
        let json = self.report.to_json();
        fs::write(self.dir.join("report.json"), json)
            .map_err(|e| Failure::Io(format!("cannot write report.json: {e}")))?;
        self.files.push("report.json".to_string());
        Ok(())
    }

    /// Picard options for the fixed-point routes.
    fn picard_options(&self) -> PicardOptions {
        let t = &self.config.tolerances;
        let mut opts = PicardOptions {
            tol: t.picard,
            max_iter: t.max_iterations,
            override_certificate: self.config.solver.override_certificate,
            ..PicardOptions::default()
        };
        if let Some(degree) = t.regression_degree {
            opts.regression_degree = degree;
        }
        opts
    }

    /// Runs one leader route.
    fn solve_equilibrium(&self, kind: SolverKind) -> Result<EquilibriumSolution, Failure> {
        let b = self.built;
        let opts = self.picard_options();
        let result = match kind {
            SolverKind::P2 => solve_p2_affine(&b.coeffs, &b.spec, &b.grid),
            SolverKind::P1 => solve_p1_pointwise(&b.coeffs, &b.spec, &b.grid, &b.ensemble, &opts),
            SolverKind::General => {
                solve_p_general(&b.coeffs, &b.spec, &b.grid, &b.ensemble, &opts)
            }
            other => unreachable!("not a leader route: {other:?}"),
        };
        result.map_err(|e| Failure::Solver {
            class: error_class(&e).to_string(),
            message: e.to_string(),
        })
    }

    // ------------------------------------------------------------------
    // solve
    // ------------------------------------------------------------------

    /// The `solve` action.
    fn solve(mut self) -> Result<(), Failure> {
        match self.config.solver.kind {
            SolverKind::Blq => {
                let (xi, u1) = self
                    .built
                    .blq_inputs
                    .clone()
                    .expect("build() guarantees blq inputs for the blq route");
                let sol = match solve_blq(
                    &self.built.coeffs,
                    &xi,
                    &u1,
                    &self.built.grid,
                    &self.built.ensemble,
                ) {
                    Ok(sol) => sol,
                    Err(e) => {
                        return Err(self
                            .finish_err(error_class(&e).to_string(), e.to_string()))
                    }
                };
                self.emit_follower_outputs(&sol)?;
                let summary = format!(
                    "blq: J2 = {:.6e}, stationarity residual {:.3e}",
                    sol.j2, sol.stationarity_residual
                );
                self.finish_ok(&summary)
            }
            kind @ (SolverKind::P1 | SolverKind::P2 | SolverKind::General) => {
                let sol = match self.solve_equilibrium(kind) {
                    Ok(sol) => sol,
                    Err(Failure::Solver { class, message }) => {
                        return Err(self.finish_err(class, message))
                    }
                    Err(other) => return Err(other),
                };
                self.emit_equilibrium_outputs(&sol)?;
                let summary = format!(
                    "{}: branch {:?}, λ = {:.6e}, J1 = {:.6e}, J2 = {:.6e}",
                    kind.name(),
                    sol.branch,
                    sol.lambda,
                    sol.j1,
                    sol.j2
                );
                self.finish_ok(&summary)
            }
            SolverKind::Certify | SolverKind::Oracle => {
                unreachable!("rerouted in run() before the solve action")
            }
        }
    }

    /// Fills the report and tables for a leader equilibrium.
    fn emit_equilibrium_outputs(&mut self, sol: &EquilibriumSolution) -> Result<(), Failure> {
        let kkt = verify_kkt(sol, &self.built.spec, self.config.tolerances.kkt);
        let stationarity = follower_stationarity(&self.built.coeffs, sol);
        self.report.equilibrium = Some(EquilibriumReport {
            branch: sol.branch,
            lambda: sol.lambda,
            j1: sol.j1,
            j2: sol.j2,
            xi_mean: sol.xi.mean().iter().copied().collect(),
            stationarity_residual: stationarity,
            kkt,
            branch_diagnostics: sol.branch_diagnostics.clone(),
            picard: sol.picard_trace.clone(),
            phi_sign_changes: sol.phi_sign_changes.clone(),
        });

        let series = [
            Series { name: "xbar", unit: "state", path: &sol.xbar },
            Series { name: "zbar", unit: "state", path: &sol.zbar },
            Series { name: "g", unit: "costate", path: &sol.g },
            Series { name: "h", unit: "costate", path: &sol.h },
            Series { name: "ybar", unit: "costate", path: &sol.ybar },
            Series { name: "q", unit: "costate", path: &sol.q },
            Series { name: "u1", unit: "control", path: &sol.u1 },
            Series { name: "u2", unit: "control", path: &sol.u2 },
        ];
        self.write_file("trajectories.csv", &trajectory_csv(&self.built.grid, &series))?;
        if self.config.output.raw_scenarios {
            self.write_file("scenarios.csv", &raw_scenario_csv(&self.built.grid, &series))?;
        }
        Ok(())
    }

    /// Fills the report and tables for a follower-only solve.
    fn emit_follower_outputs(&mut self, sol: &FollowerSolution) -> Result<(), Failure> {
        self.report.follower = Some(FollowerReport {
            j2: sol.j2,
            stationarity_residual: sol.stationarity_residual,
            x0_mean: sol.x.mean_at(0).iter().copied().collect(),
        });
        let series = [
            Series { name: "x", unit: "state", path: &sol.x },
            Series { name: "z", unit: "state", path: &sol.z },
            Series { name: "y", unit: "costate", path: &sol.y },
            Series { name: "u2", unit: "control", path: &sol.u2 },
        ];
        self.write_file("trajectories.csv", &trajectory_csv(&self.built.grid, &series))?;
        if self.config.output.raw_scenarios {
            self.write_file("scenarios.csv", &raw_scenario_csv(&self.built.grid, &series))?;
        }
        Ok(())
    }

    // ------------------------------------------------------------------
    // certify
    // ------------------------------------------------------------------

    /// The `certify` action: every certificate, no solve, exit 0.
    fn certify(mut self) -> Result<(), Failure> {
        let b = self.built;
        let n = b.coeffs.n;

        let follower_convexity = CertificateOutcome::from_result(
            solve_sre1(&b.coeffs, &DMatrix::zeros(n, n), &b.grid)
                .and_then(|sre1| follower_convexity_certificate(&sre1, &b.coeffs.h2)),
        );
        let leader_convexity = CertificateOutcome::from_result(
            solve_sre2(&b.coeffs, &b.grid)
                .and_then(|sre2| leader_convexity_certificate(&sre2, &b.coeffs.h1)),
        );
        let input = CertifyInput::Coefficients(&b.coeffs);
        let wellposedness_general =
            CertificateOutcome::from_result(certify(&input, CertifyVariant::General, None));
        let wellposedness_leader_stack =
            CertificateOutcome::from_result(certify(&input, CertifyVariant::Bfsde2, None));
        let wellposedness_follower_stack =
            CertificateOutcome::from_result(certify(&input, CertifyVariant::Follower, None));

        // The exact gate the fixed-point routes apply: the discounting
        // criterion on the assembled (projection-coupled, untilted) system.
        let gate_set = if b.spec.pointwise_enabled {
            b.spec.k.clone()
        } else {
            ConvexSet::FullSpace(n)
        };
        let fixed_point_gate = CertificateOutcome::from_result(
            leader_fixed_point_system(&b.coeffs, &gate_set, None, &b.grid)
                .and_then(|sys| certify(&CertifyInput::System(&sys), CertifyVariant::General, None)),
        );

        // Instance-independent reference arithmetic: the explicit
        // small-gain bound at its worked constants.
        let worked_reference = CertificateOutcome::from_result(certify(
            &CertifyInput::Constants(WORKED_CONSTANTS),
            CertifyVariant::Remark61,
            Some(1.0),
        ));

        let lines = [
            describe_convexity("follower convexity", &follower_convexity),
            describe_convexity("leader convexity", &leader_convexity),
            describe_wellposedness("wellposedness (general)", &wellposedness_general),
            describe_wellposedness("wellposedness (leader stack)", &wellposedness_leader_stack),
            describe_wellposedness(
                "wellposedness (follower stack)",
                &wellposedness_follower_stack,
            ),
            describe_wellposedness("fixed-point gate", &fixed_point_gate),
            describe_wellposedness("worked small-gain reference", &worked_reference),
        ];

        self.report.certificates = Some(CertificateReport {
            follower_convexity,
            leader_convexity,
            wellposedness_general,
            wellposedness_leader_stack,
            wellposedness_follower_stack,
            fixed_point_gate,
            worked_reference,
        });
        self.finish_ok(&lines.join("\n"))
    }

    // ------------------------------------------------------------------
    // oracle-compare
    // ------------------------------------------------------------------

    /// The `oracle-compare` action: solve, run the discrete oracle, fail
    /// (exit 3) when they disagree beyond the configured tolerance.
    fn oracle_compare(mut self) -> Result<(), Failure> {
        let b = self.built;
        let route = match continuous_route(self.config, b) {
            Ok(route) => route,
            Err(f) => return Err(f),
        };
        let tolerance = self.config.tolerances.comparison;

        let oracle_set = if b.spec.pointwise_enabled {
            b.spec.k.clone()
        } else {
            ConvexSet::FullSpace(b.coeffs.n)
        };
        let affine = if b.spec.affine_enabled {
            Some((b.spec.alpha.clone(), b.spec.beta))
        } else {
            None
        };
        let dg = match DiscreteGame::new(b.coeffs.clone(), oracle_set, affine) {
            Ok(dg) => dg,
            Err(e) => return Err(self.finish_err(error_class(&e).to_string(), e.to_string())),
        };

        if route == SolverKind::Blq {
            return self.oracle_compare_follower(&dg, tolerance);
        }

        let oracle = match oracle_leader(&dg) {
            Ok(o) => o,
            Err(e) => return Err(self.finish_err(error_class(&e).to_string(), e.to_string())),
        };
        let sol = match self.solve_equilibrium(route) {
            Ok(sol) => sol,
            Err(Failure::Solver { class, message }) => return Err(self.finish_err(class, message)),
            Err(other) => return Err(other),
        };
        self.emit_equilibrium_outputs(&sol)?;

        let cmp = match compare(&sol, &oracle, tolerance) {
            Ok(cmp) => cmp,
            Err(e) => return Err(self.finish_err(error_class(&e).to_string(), e.to_string())),
        };
        let within = cmp.within;
        let summary = format!(
            "oracle ({}): J1 gap {:.3e}, J2 gap {:.3e}, ξ gap {:.3e}, multiplier gap {:.3e} → {}",
            route.name(),
            cmp.j1_gap,
            cmp.j2_gap,
            cmp.xi_gap,
            cmp.multiplier_gap,
            if within { "within tolerance" } else { "MISMATCH" }
        );
        self.report.comparison = Some(ComparisonSection {
            leader: Some(cmp),
            follower: None,
            oracle_kkt_residual: oracle.kkt_residual,
        });

        if within {
            self.finish_ok(&summary)
        } else {
            Err(self.finish_err(
                "ComparisonMismatch".to_string(),
                format!(
                    "continuous solution disagrees with the discrete oracle beyond the \
                     comparison tolerance {tolerance:.1e}"
                ),
            ))
        }
    }

    /// Follower-route oracle comparison: `blq` against the exact QP.
    fn oracle_compare_follower(
        mut self,
        dg: &DiscreteGame,
        tolerance: f64,
    ) -> Result<(), Failure> {
        let b = self.built;
        let (xi, u1) = b
            .blq_inputs
            .clone()
            .expect("build() guarantees blq inputs for the blq route");
        let TerminalControl::Deterministic(xi_vec) = &xi else {
            unreachable!("validate_route restricts the oracle follower target");
        };

        let u1_steps: Vec<DVector<f64>> =
            (0..b.grid.steps).map(|k| u1.at(0, k)).collect();
        let oracle = match oracle_follower(dg, xi_vec, &u1_steps) {
            Ok(o) => o,
            Err(e) => return Err(self.finish_err(error_class(&e).to_string(), e.to_string())),
        };

        let sol = match solve_blq(&b.coeffs, &xi, &u1, &b.grid, &b.ensemble) {
            Ok(sol) => sol,
            Err(e) => return Err(self.finish_err(error_class(&e).to_string(), e.to_string())),
        };
        self.emit_follower_outputs(&sol)?;

        let j2_gap = (sol.j2 - oracle.j2).abs() / oracle.j2.abs().max(1e-9);
        let mut u2_gap = 0.0f64;
        for (k, u2_k) in oracle.u2.iter().enumerate() {
            let mean = sol.u2.mean_at(k);
            u2_gap = u2_gap.max((mean - u2_k).amax());
        }
        let within = j2_gap <= tolerance;
        let summary = format!(
            "oracle (blq): J2 gap {:.3e}, u2 gap {:.3e} → {}",
            j2_gap,
            u2_gap,
            if within { "within tolerance" } else { "MISMATCH" }
        );
        self.report.comparison = Some(ComparisonSection {
            leader: None,
            follower: Some(FollowerComparison {
                j2_gap,
                u2_gap,
                tolerance,
                within,
            }),
            oracle_kkt_residual: oracle.kkt_residual,
        });

        if within {
            self.finish_ok(&summary)
        } else {
            Err(self.finish_err(
                "ComparisonMismatch".to_string(),
                format!(
                    "follower response disagrees with the discrete oracle beyond the \
                     comparison tolerance {tolerance:.1e}"
                ),
            ))
        }
    }
}

// ======================================================================
// Helpers
// ======================================================================

/// The worked constants of the explicit small-gain bound: `ρ₁ = −10`,
/// `k₄ = 0.5`, `k₅ = 1`, `k₁ = k₉ = k₁₀ = 0.1`, everything else zero.
const WORKED_CONSTANTS: H5Constants = H5Constants {
    rho1: -10.0,
    rho2: 0.0,
    k: [0.1, 0.0, 0.0, 0.5, 1.0, 0.0, 0.0, 0.0, 0.1, 0.1, 0.0, 0.0],
};

/// Recomputes the follower stationarity residual
/// `sup ‖R₂₂ū₂ − B₂ᵀȲ‖` from the returned equilibrium paths.
fn follower_stationarity(coeffs: &GameCoefficients, sol: &EquilibriumSolution) -> f64 {
    let scenarios = sol.u2.scenarios.max(sol.ybar.scenarios);
    let mut worst = 0.0f64;
    for k in 0..sol.u2.grid.len() {
        let r22 = coeffs.r22.at(k);
        let b2t = coeffs.b2.at(k).transpose();
        for m in 0..scenarios {
            let u2 = DVector::from_column_slice(sol.u2.node_broadcast(m, k));
            let y = DVector::from_column_slice(sol.ybar.node_broadcast(m, k));
            worst = worst.max((r22 * u2 - &b2t * y).norm());
        }
    }
    worst
}

/// One printable verdict line for a convexity certificate slot.
fn describe_convexity(
    name: &str,
    outcome: &CertificateOutcome<stackelberg_bsde::riccati::ConvexityCertificate>,
) -> String {
    match (&outcome.value, &outcome.error) {
        (Some(cert), _) => format!(
            "{name}: {} (margin {:.3e})",
            if cert.convex { "PASS" } else { "FAIL" },
            cert.margin
        ),
        (None, Some(err)) => format!("{name}: unavailable ({err})"),
        (None, None) => unreachable!("an outcome is a value or an error"),
    }
}

/// One printable verdict line for a wellposedness certificate slot.
fn describe_wellposedness(
    name: &str,
    outcome: &CertificateOutcome<stackelberg_bsde::bfsde::WellposednessCertificate>,
) -> String {
    match (&outcome.value, &outcome.error) {
        (Some(cert), _) => {
            let theta = cert
                .theta
                .map(|t| format!(", θ = {t:.6}"))
                .unwrap_or_default();
            format!(
                "{name}: {} (contraction factor {:.3}{theta})",
                if cert.verdict { "PASS" } else { "FAIL" },
                cert.contraction_factor
            )
        }
        (None, Some(err)) => format!("{name}: unavailable ({err})"),
        (None, None) => unreachable!("an outcome is a value or an error"),
    }
}

