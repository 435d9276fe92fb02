//! The quadratic-hedging preset: a one-dimensional wealth game between a
//! benchmark-setting leader and a hedging follower.
//!
//! The market has a riskless rate `r(·)`, a risky drift `μ(·)`, and a
//! volatility `σ(·)`.  Written on discounted wealth, the backward dynamics
//! take the standard form with
//!
//! ```text
//! A = r,    B₁ = B₂ ≡ −1,    C = (μ − r)/σ,
//! ```
//!
//! i.e. the market price of risk enters as the diffusion feedback, and each
//! player's consumption-rate control enters with a unit sign flip.  Running
//! state/diffusion weights vanish; the players pay for control effort
//! (`R₁`, `R₂ > 0`) and the leader pays for the terminal benchmark through
//! `G₁ > 0` — the positivity each route's convexity argument needs.
//!
//! The preset requires `μ(s) > r(s)` at every node: a risky asset that
//! does not out-earn the riskless rate makes the market price of risk
//! non-positive and the hedging interpretation void, so such inputs are
//! rejected before a config ever exists.

use crate::config::{
    CoefficientTable, Coefficients, Constraint, Dimensions, Ensemble, Output, ProblemConfig,
    SchemaError, SetConfig, SolverKind, SolverSection, Time, Tolerances, TomlMatrix,
};

/// Which constraint regime the generated config runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum FinancePreset {
    /// Nonnegative terminal wealth only: `K = ℝ₊`, solved by `p1`.
    Pointwise,
    /// Expected-benchmark floor only: `⟨α, 𝔼ξ⟩ ≥ β`, solved by `p2`.
    Affine,
    /// Both constraints, solved by the general multiplier search.
    Both,
}

/// Market and run parameters of the preset.
///
/// `rate`, `mu`, and `sigma` are paths: a single entry is a constant, and
/// `steps + 1` entries give one value per grid node.
#[derive(Debug, Clone)]
pub struct FinanceParams {
    /// Riskless rate `r(·)`.
    pub rate: Vec<f64>,
    /// Risky drift `μ(·)`; must exceed `rate` at every node.
    pub mu: Vec<f64>,
    /// Volatility `σ(·) > 0`.
    pub sigma: Vec<f64>,
    /// Affine benchmark level `β` (used by `affine` and `both`).
    pub beta: f64,
    /// Horizon `T`.
    pub horizon: f64,
    /// Grid steps `N`.
    pub steps: usize,
    /// Monte Carlo scenarios for the fixed-point routes.
    pub scenarios: usize,
    /// Ensemble seed.
    pub seed: u64,
    /// Leader control weight `R₁ > 0`.
    pub r1: f64,
    /// Follower control weight `R₂ > 0`.
    pub r2: f64,
    /// Leader terminal weight `G₁ > 0`.
    pub terminal_weight: f64,
}

impl Default for FinanceParams {
    /// The reference market: `r ≡ 0.02`, `μ ≡ 0.07`, `σ ≡ 0.2`, so
    /// `C ≡ 0.25`, on `[0, 1]` with 128 steps and unit control weights.
    fn default() -> Self {
        FinanceParams {
            rate: vec![0.02],
            mu: vec![0.07],
            sigma: vec![0.2],
            beta: 0.0,
            horizon: 1.0,
            steps: 128,
            scenarios: 16,
            seed: 42,
            r1: 1.0,
            r2: 1.0,
            terminal_weight: 1.0,
        }
    }
}

/// Builds the preset's problem config.
///
/// # Errors
///
/// [`SchemaError`] when a market parameter is invalid: `μ ≤ r` anywhere,
/// `σ ≤ 0` anywhere, a non-positive weight, a bad horizon, or a path whose
/// length is neither 1 nor `steps + 1`.
pub fn finance_preset(
    preset: FinancePreset,
    params: &FinanceParams,
) -> Result<ProblemConfig, SchemaError> {
    if !params.horizon.is_finite() || params.horizon <= 0.0 {
        return Err(SchemaError(format!(
            "horizon must be positive and finite, got {}",
            params.horizon
        )));
    }
    if params.steps == 0 {
        return Err(SchemaError("steps must be at least 1".to_string()));
    }
    for (name, v) in [
        ("r1", params.r1),
        ("r2", params.r2),
        ("terminal_weight", params.terminal_weight),
    ] {
        if !v.is_finite() || v <= 0.0 {
            return Err(SchemaError(format!(
                "{name} must be positive and finite, got {v} (the quadratic-hedging costs \
                 need strictly positive weights)"
            )));
        }
    }
    if !params.beta.is_finite() {
        return Err(SchemaError(format!(
            "beta must be finite, got {}",
            params.beta
        )));
    }

    let nodes = params.steps + 1;
    let rate = broadcast("rate", &params.rate, nodes)?;
    let mu = broadcast("mu", &params.mu, nodes)?;
    let sigma = broadcast("sigma", &params.sigma, nodes)?;
    let mut price_of_risk = Vec::with_capacity(nodes);
    for k in 0..nodes {
        if sigma[k] <= 0.0 {
            return Err(SchemaError(format!(
                "sigma must be strictly positive, got {} at node {k}",
                sigma[k]
            )));
        }
        if mu[k] <= rate[k] {
            return Err(SchemaError(format!(
                "mu must exceed rate at every node, got mu = {} ≤ rate = {} at node {k} \
                 (the market price of risk would not be positive)",
                mu[k], rate[k]
            )));
        }
        price_of_risk.push((mu[k] - rate[k]) / sigma[k]);
    }

    let scalar_const = |v: f64| CoefficientTable {
        constant: Some(vec![vec![v]]),
        nodewise: None,
    };
    let scalar_path = |vals: &[f64]| {
        // Collapse a constant path back to the compact form.
        if vals.iter().all(|&v| v == vals[0]) {
            scalar_const(vals[0])
        } else {
            CoefficientTable {
                constant: None,
                nodewise: Some(vals.iter().map(|&v| vec![vec![v]]).collect()),
            }
        }
    };
    let zero: TomlMatrix = vec![vec![0.0]];

    let (pointwise, affine, set, alpha, kind) = match preset {
        FinancePreset::Pointwise => (
            true,
            false,
            SetConfig::NonnegativeOrthant,
            Vec::new(),
            SolverKind::P1,
        ),
        FinancePreset::Affine => (false, true, SetConfig::FullSpace, vec![1.0], SolverKind::P2),
        FinancePreset::Both => (
            true,
            true,
            SetConfig::NonnegativeOrthant,
            vec![1.0],
            SolverKind::General,
        ),
    };

    Ok(ProblemConfig {
        dimensions: Dimensions {
            state: 1,
            leader: 1,
            follower: 1,
        },
        time: Time {
            horizon: params.horizon,
            steps: params.steps,
        },
        ensemble: Ensemble {
            scenarios: params.scenarios,
            seed: params.seed,
            antithetic: false,
            degenerate: false,
        },
        coefficients: Coefficients {
            a: scalar_path(&rate),
            b1: scalar_const(-1.0),
            b2: scalar_const(-1.0),
            c: scalar_path(&price_of_risk),
            q1: scalar_const(0.0),
            q2: scalar_const(0.0),
            s1: scalar_const(0.0),
            s2: scalar_const(0.0),
            r11: scalar_const(params.r1),
            r22: scalar_const(params.r2),
            g1: vec![vec![params.terminal_weight]],
            h1: zero.clone(),
            h2: zero,
        },
        constraint: Constraint {
            pointwise,
            affine,
            alpha,
            beta: params.beta,
            set,
        },
        solver: SolverSection {
            kind,
            xi: None,
            xi_noise: None,
            u1: None,
            override_certificate: false,
        },
        tolerances: Tolerances::default(),
        output: Output::default(),
    })
}

/// Expands a length-1 or length-`nodes` parameter path.
fn broadcast(name: &str, values: &[f64], nodes: usize) -> Result<Vec<f64>, SchemaError> {
    for (i, v) in values.iter().enumerate() {
        if !v.is_finite() {
            return Err(SchemaError(format!(
                "{name}[{i}] must be finite, got {v}"
            )));
        }
    }
    match values.len() {
        1 => Ok(vec![values[0]; nodes]),
        len if len == nodes => Ok(values.to_vec()),
        len => Err(SchemaError(format!(
            "{name} must have 1 entry (constant) or steps + 1 = {nodes} entries (nodewise), \
             got {len}"
        ))),
    }
}

// ======================================================================
// Tests
// ======================================================================

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_market_maps_to_expected_coefficients() {
        // r ≡ 0.02, μ ≡ 0.07, σ ≡ 0.2 gives the price of risk C ≡ 0.25,
        // A ≡ 0.02, and both control channels ≡ −1.
        let cfg = finance_preset(FinancePreset::Affine, &FinanceParams::default())
            .expect("reference market is valid");
        let built = cfg.build().expect("preset config builds");
        assert_eq!(built.coeffs.a.at(0)[(0, 0)], 0.02);
        assert_eq!(built.coeffs.c.at(0)[(0, 0)], 0.25);
        assert_eq!(built.coeffs.b1.at(64)[(0, 0)], -1.0);
        assert_eq!(built.coeffs.b2.at(128)[(0, 0)], -1.0);
        assert!(built.spec.affine_enabled && !built.spec.pointwise_enabled);
        assert_eq!(cfg.solver.kind, SolverKind::P2);
    }

    #[test]
    fn presets_select_their_constraint_regimes() {
        let p = FinanceParams::default();
        let pw = finance_preset(FinancePreset::Pointwise, &p).unwrap();
        assert_eq!(pw.solver.kind, SolverKind::P1);
        assert!(pw.constraint.pointwise && !pw.constraint.affine);
        assert!(matches!(pw.constraint.set, SetConfig::NonnegativeOrthant));

        let both = finance_preset(FinancePreset::Both, &p).unwrap();
        assert_eq!(both.solver.kind, SolverKind::General);
        assert!(both.constraint.pointwise && both.constraint.affine);
        assert_eq!(both.constraint.alpha, vec![1.0]);
    }

    #[test]
    fn flat_or_inverted_markets_are_rejected() {
        // μ ≡ r: no excess return anywhere.
        let flat = FinanceParams {
            mu: vec![0.02],
            ..FinanceParams::default()
        };
        let err = finance_preset(FinancePreset::Affine, &flat)
            .expect_err("mu = rate must be rejected");
        assert!(err.0.contains("mu"), "names the parameter: {err}");

        // A nodewise μ that dips below r at a single node is just as bad.
        let steps = 4;
        let dip = FinanceParams {
            mu: vec![0.07, 0.07, 0.01, 0.07, 0.07],
            steps,
            ..FinanceParams::default()
        };
        let err2 = finance_preset(FinancePreset::Affine, &dip)
            .expect_err("a single bad node must be rejected");
        assert!(err2.0.contains("node 2"), "locates the node: {err2}");
    }

    #[test]
    fn nodewise_market_parameters_round_trip_through_the_schema() {
        // A rising rate: nodewise A and C, still a valid config.
        let steps = 4;
        let p = FinanceParams {
            rate: vec![0.01, 0.015, 0.02, 0.025, 0.03],
            steps,
            ..FinanceParams::default()
        };
        let cfg = finance_preset(FinancePreset::Affine, &p).unwrap();
        let built = cfg.build().expect("nodewise preset builds");
        assert_eq!(built.coeffs.a.at(0)[(0, 0)], 0.01);
        assert_eq!(built.coeffs.a.at(4)[(0, 0)], 0.03);
        // C = (μ − r)/σ node by node.
        assert!((built.coeffs.c.at(4)[(0, 0)] - (0.07 - 0.03) / 0.2).abs() < 1e-15);
        // And the TOML echo preserves the digest.
        let echoed = ProblemConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(cfg.digest().unwrap(), echoed.digest().unwrap());
    }

    #[test]
    fn degenerate_weights_are_rejected() {
        let bad = FinanceParams {
            r2: 0.0,
            ..FinanceParams::default()
        };
        let err = finance_preset(FinancePreset::Pointwise, &bad)
            .expect_err("zero follower weight must be rejected");
        assert!(err.0.contains("r2"), "names the weight: {err}");
    }
}
