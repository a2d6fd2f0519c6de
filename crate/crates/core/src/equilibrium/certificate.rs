//! Self-contained equilibrium certificates and their re-verification.

use serde::{Deserialize, Deserializer, Serialize};

use crate::error::{Error, Result};
use crate::oracle::{
    oracle_allocation, oracle_density, oracle_lambda, ExponentialInstance, ADOPTED_LAMBDA,
};
use crate::scenario::{expectation, Allocation, ClusterPartition, PricingVector, ScenarioSpace};
use crate::solver::{
    duality_gap, fixed_q_objective, solve_dual, solve_fixed_q_dual, solve_primal, DualSolution,
    PrimalSolution, SolverConfig,
};
use crate::utility::{Family, UtilitySpec};

use super::triple::{assemble, EquilibriumTriple};
use super::verify::{
    clearing_residual, fairness_min_slack, pricing_spread, verify_measurability, verify_nash,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TripleRecord {
    pub y_tilde: Vec<Vec<f64>>,
    pub q_density: Vec<Vec<f64>>,
    pub a: Vec<f64>,
    pub budget: f64,
}

impl From<&EquilibriumTriple> for TripleRecord {
    fn from(t: &EquilibriumTriple) -> Self {
        TripleRecord {
            y_tilde: t.y_tilde.rows(),
            q_density: t.q.densities().rows(),
            a: t.a.clone(),
            budget: t.budget,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Values {
    pub primal: f64,
    pub dual: f64,
    pub gap: f64,
}

/// Non-finite residuals are written as `null`; read them back as NaN so the
/// check fails on them instead of rejecting the file.
fn nullable<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Residuals {
    /// `max_w |sum_j Y~_j(w)|`, and the scenario spread of each cluster sum.
    #[serde(deserialize_with = "nullable")]
    pub clearing_max: f64,
    /// `max_j |E_{Q^j}[Y~^j]|`
    #[serde(deserialize_with = "nullable")]
    pub budget_expectation_max: f64,
    #[serde(deserialize_with = "nullable")]
    pub nash_max_improvement: f64,
    /// Smallest `sum_j Y^j - sum_j E_{Q^j}[Y^j]` over sampled feasible `Y`.
    #[serde(deserialize_with = "nullable")]
    pub fairness_min_slack: f64,
    /// Zero when the check does not apply (see `flags.measurability_checked`).
    #[serde(deserialize_with = "nullable")]
    pub measurability_max_spread: f64,
    /// Distance of the recorded dual value from the fixed-`Q` objective at the
    /// recorded `lambda` and from its minimum over `lambda`.
    #[serde(deserialize_with = "nullable")]
    pub fixed_q_consistency: f64,
    /// `|sum_j a_j - A|`
    #[serde(deserialize_with = "nullable")]
    pub budget_sum_error: f64,
    /// `|E_P[U(X + a + Y~ - E_Q[Y~])] - primal|`
    #[serde(deserialize_with = "nullable")]
    pub value_consistency: f64,
    /// Weak-duality slack of the recorded `(lambda, Q)` against the primal value.
    #[serde(deserialize_with = "nullable")]
    pub fenchel_slack: f64,
    /// Distance of `lambda dQ^j/dP` from the superdifferential of `U` at the
    /// post-trade positions, relative to `max(1, lambda max dQ/dP)`.
    #[serde(deserialize_with = "nullable")]
    pub multiplier_consistency: f64,
    /// Largest difference between density rows of agents in a common cluster.
    #[serde(deserialize_with = "nullable")]
    pub pricing_spread_max: f64,
    /// Deviation from the closed-form exponential equilibrium, when available.
    pub oracle_max_deviation: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Flags {
    pub unique: bool,
    pub differentiable: bool,
    pub oracle_checked: bool,
    pub approximate: bool,
    pub dual_unique: bool,
    pub measurability_checked: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Meta {
    pub config_hash: String,
    pub version: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EquilibriumCertificate {
    pub triple: TripleRecord,
    pub lambda: f64,
    pub values: Values,
    pub residuals: Residuals,
    pub flags: Flags,
    pub meta: Meta,
}

/// Acceptance thresholds. Fields marked relative are multiplied by
/// `max(1, |primal|)`; clearing and budget errors by `max(1, max |Y^|)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Tolerances {
    pub clearing: f64,
    pub budget_expectation: f64,
    pub budget_sum: f64,
    /// relative
    pub gap: f64,
    /// relative
    pub nash: f64,
    /// relative
    pub fairness: f64,
    pub measurability: f64,
    /// relative
    pub fixed_q: f64,
    /// relative
    pub value: f64,
    /// relative
    pub fenchel: f64,
    pub multiplier: f64,
    pub pricing_spread: f64,
    pub oracle: f64,
}

impl Tolerances {
    pub const STRICT: Tolerances = Tolerances {
        clearing: 1e-10,
        budget_expectation: 1e-8,
        budget_sum: 1e-10,
        gap: 1e-8,
        nash: 1e-7,
        fairness: 1e-9,
        measurability: 1e-8,
        fixed_q: 1e-8,
        value: 1e-9,
        fenchel: 1e-9,
        multiplier: 1e-7,
        pricing_spread: 1e-12,
        oracle: 1e-7,
    };

    /// For results that involve derivative-free searches (tolerance `~1e-7`
    /// in the positions), which propagates to values and multipliers.
    pub const APPROXIMATE: Tolerances = Tolerances {
        gap: 1e-6,
        nash: 1e-5,
        measurability: 1e-6,
        fixed_q: 1e-6,
        value: 1e-7,
        multiplier: 1e-6,
        ..Tolerances::STRICT
    };

    pub fn for_utility(u: &UtilitySpec) -> Tolerances {
        if u.is_differentiable() {
            Tolerances::STRICT
        } else {
            Tolerances::APPROXIMATE
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckItem {
    pub name: &'static str,
    pub value: f64,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckReport {
    pub items: Vec<CheckItem>,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.items.iter().all(|i| i.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckItem> {
        self.items.iter().filter(|i| !i.passed)
    }

    fn at_most(&mut self, name: &'static str, value: f64, tolerance: f64) {
        self.items.push(CheckItem {
            name,
            value,
            tolerance,
            passed: value <= tolerance,
        });
    }

    fn at_least(&mut self, name: &'static str, value: f64, bound: f64) {
        self.items.push(CheckItem {
            name,
            value,
            tolerance: bound,
            passed: value >= bound,
        });
    }
}

#[derive(Debug, Clone)]
pub struct CertifyOptions {
    pub fairness_samples: usize,
    pub fairness_seed: u64,
    pub config_hash: String,
    /// Compare against the closed form when the utility is exponential and
    /// there is a single cluster.
    pub use_oracle: bool,
}

impl Default for CertifyOptions {
    fn default() -> Self {
        CertifyOptions {
            fairness_samples: 256,
            fairness_seed: 0x5eed,
            config_hash: String::new(),
            use_oracle: true,
        }
    }
}

/// Everything produced by a solve-and-certify run.
#[derive(Debug, Clone)]
pub struct Certification {
    pub certificate: EquilibriumCertificate,
    pub report: CheckReport,
    pub triple: EquilibriumTriple,
    pub primal: PrimalSolution,
    pub dual: DualSolution,
}

struct Instance<'a> {
    space: &'a ScenarioSpace,
    x: &'a Allocation,
    u: &'a UtilitySpec,
    partition: &'a ClusterPartition,
    cfg: &'a SolverConfig,
}

fn oracle_deviation(inst: &Instance, t: &EquilibriumTriple, lambda: f64) -> Result<Option<f64>> {
    if inst.u.family() != Family::ExpPairwise || !inst.partition.is_single() {
        return Ok(None);
    }
    let exp = ExponentialInstance::from_utility(inst.u, inst.x.clone(), t.budget)?;
    let y_hat = t.y_tilde.shift_rows(&t.a);
    let alloc = oracle_allocation(&exp).max_abs_diff(&y_hat);
    let density = oracle_density(inst.space, &exp)?
        .densities()
        .max_abs_diff(t.q.densities());
    let lam = oracle_lambda(inst.space, &exp, ADOPTED_LAMBDA);
    Ok(Some(alloc.max(density).max((lambda - lam).abs() / lam)))
}

/// Derivative-free positions can land on either side of a kink; widen the
/// superdifferential by this much in each coordinate.
const KINK_SLACK: f64 = 1e-6;

fn multiplier_consistency(inst: &Instance, t: &EquilibriumTriple, lambda: f64) -> Result<f64> {
    let positions = t.positions(inst.space, inst.x)?;
    let scale = 1f64.max(
        lambda
            * t.q
                .densities()
                .as_slice()
                .iter()
                .fold(0.0f64, |m, v| m.max(*v)),
    );
    let smooth = inst.u.is_differentiable();
    let mut worst = 0.0f64;
    for w in 0..inst.space.len() {
        let col = positions.column(w);
        for j in 0..inst.u.n() {
            // For concave U the left partial dominates the right one.
            let (left, right) = if smooth {
                inst.u.one_sided_partials(&col, j)
            } else {
                let slice = inst.u.slice(&col, j);
                (
                    slice.deriv(col[j] - KINK_SLACK).0,
                    slice.deriv(col[j] + KINK_SLACK).1,
                )
            };
            let target = lambda * t.q.density(j, w);
            let dist = if target > left {
                target - left
            } else if target < right {
                right - target
            } else {
                0.0
            };
            worst = worst.max(if dist.is_nan() { f64::INFINITY } else { dist });
        }
    }
    Ok(worst / scale)
}

/// Recomputes every residual of `(triple, lambda)` against the recorded values.
fn evaluate(
    inst: &Instance,
    t: &EquilibriumTriple,
    lambda: f64,
    values: &Values,
    fairness: (usize, u64),
) -> Result<(Residuals, CheckReport, bool)> {
    let tol = Tolerances::for_utility(inst.u);
    let scale = 1f64.max(values.primal.abs());
    let y_scale = t
        .y_tilde
        .as_slice()
        .iter()
        .chain(&t.a)
        .fold(1.0f64, |m, v| m.max(v.abs()));

    let budget_expectation_max = expectation(inst.space, &t.y_tilde, &t.q)?
        .iter()
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let nash = verify_nash(t, inst.space, inst.x, inst.u, inst.cfg)?;
    let measurability = verify_measurability(t, inst.x, inst.u, inst.partition)?;
    let positions = t.positions(inst.space, inst.x)?;
    let recomputed_primal = inst
        .space
        .expect_with(|w| inst.u.evaluate(&positions.column(w)));

    let (fenchel_value, fixed_q_min) = if lambda.is_finite() && lambda >= 0.0 {
        let at_lambda =
            fixed_q_objective(inst.space, inst.x, inst.u, t.budget, &t.q, lambda, inst.cfg)?;
        let min = solve_fixed_q_dual(inst.space, inst.x, inst.u, t.budget, &t.q, inst.cfg)?.value;
        (at_lambda, min)
    } else {
        (f64::NAN, f64::NAN)
    };

    let residuals = Residuals {
        clearing_max: clearing_residual(&t.y_tilde, inst.partition),
        budget_expectation_max,
        nash_max_improvement: nash.max_improvement,
        fairness_min_slack: fairness_min_slack(
            t,
            inst.space,
            inst.partition,
            fairness.0,
            fairness.1,
        )?,
        measurability_max_spread: measurability.max_spread(),
        fixed_q_consistency: (fenchel_value - values.dual)
            .abs()
            .max((fixed_q_min - values.dual).abs()),
        budget_sum_error: (t.a.iter().sum::<f64>() - t.budget).abs(),
        value_consistency: (recomputed_primal - values.primal).abs(),
        fenchel_slack: fenchel_value - values.primal,
        multiplier_consistency: multiplier_consistency(inst, t, lambda)?,
        pricing_spread_max: pricing_spread(t, inst.partition),
        oracle_max_deviation: oracle_deviation(inst, t, lambda)?,
    };

    let mut report = CheckReport { items: Vec::new() };
    report.items.push(CheckItem {
        name: "lambda_positive",
        value: lambda,
        tolerance: 0.0,
        passed: lambda > 0.0 && lambda.is_finite(),
    });
    report.items.push(CheckItem {
        name: "density_positive",
        value: t.q.min_density(),
        tolerance: 0.0,
        passed: t.q.is_equivalent(),
    });
    report.at_most(
        "duality_gap",
        (values.dual - values.primal).abs(),
        tol.gap * scale,
    );
    report.at_most(
        "recorded_gap",
        (values.gap - (values.dual - values.primal)).abs(),
        1e-12 * scale,
    );
    report.at_most(
        "clearing_max",
        residuals.clearing_max,
        tol.clearing * y_scale,
    );
    report.at_most(
        "budget_expectation_max",
        residuals.budget_expectation_max,
        tol.budget_expectation * y_scale,
    );
    report.at_most(
        "budget_sum_error",
        residuals.budget_sum_error,
        tol.budget_sum * y_scale,
    );
    report.at_most(
        "nash_max_improvement",
        residuals.nash_max_improvement,
        tol.nash * scale,
    );
    report.at_least(
        "fairness_min_slack",
        residuals.fairness_min_slack,
        -tol.fairness * scale,
    );
    report.at_most(
        "measurability_max_spread",
        residuals.measurability_max_spread,
        tol.measurability,
    );
    report.at_most(
        "fixed_q_consistency",
        residuals.fixed_q_consistency,
        tol.fixed_q * scale,
    );
    report.at_most(
        "value_consistency",
        residuals.value_consistency,
        tol.value * scale,
    );
    report.at_least(
        "fenchel_slack",
        residuals.fenchel_slack,
        -tol.fenchel * scale,
    );
    report.at_most(
        "multiplier_consistency",
        residuals.multiplier_consistency,
        tol.multiplier,
    );
    report.at_most(
        "pricing_spread_max",
        residuals.pricing_spread_max,
        tol.pricing_spread,
    );
    if let Some(dev) = residuals.oracle_max_deviation {
        report.at_most("oracle_max_deviation", dev, tol.oracle);
    }
    Ok((residuals, report, measurability.checked))
}

/// Solves primal and dual independently, assembles the triple and records
/// every residual.
pub fn certify(
    space: &ScenarioSpace,
    x: &Allocation,
    u: &UtilitySpec,
    budget: f64,
    partition: &ClusterPartition,
    cfg: &SolverConfig,
    opts: &CertifyOptions,
) -> Result<Certification> {
    let primal = solve_primal(space, x, u, budget, partition, cfg)?;
    let dual = solve_dual(space, x, u, budget, partition, cfg)?;
    let triple = assemble(&primal, &dual, space, x, budget)?;
    let values = Values {
        primal: primal.value,
        dual: dual.value,
        gap: duality_gap(&primal, &dual),
    };
    let approximate = primal.approximate || dual.approximate;
    let (certificate, report) = certify_triple(
        space,
        x,
        u,
        partition,
        cfg,
        opts,
        &triple,
        dual.lambda,
        values,
        approximate,
    )?;
    Ok(Certification {
        certificate,
        report,
        triple,
        primal,
        dual,
    })
}

/// Records the residuals of an already assembled triple, for example one
/// built from a closed form.
#[allow(clippy::too_many_arguments)]
pub fn certify_triple(
    space: &ScenarioSpace,
    x: &Allocation,
    u: &UtilitySpec,
    partition: &ClusterPartition,
    cfg: &SolverConfig,
    opts: &CertifyOptions,
    triple: &EquilibriumTriple,
    lambda: f64,
    values: Values,
    approximate: bool,
) -> Result<(EquilibriumCertificate, CheckReport)> {
    let validation = u.validate()?;
    let inst = Instance {
        space,
        x,
        u,
        partition,
        cfg,
    };
    let fairness = (opts.fairness_samples, opts.fairness_seed);
    let (mut residuals, mut report, measurability_checked) =
        evaluate(&inst, triple, lambda, &values, fairness)?;
    if !opts.use_oracle {
        residuals.oracle_max_deviation = None;
        report.items.retain(|i| i.name != "oracle_max_deviation");
    }
    let flags = Flags {
        unique: validation.uniqueness_applies,
        differentiable: validation.smoothness.differentiable,
        oracle_checked: residuals.oracle_max_deviation.is_some(),
        approximate,
        dual_unique: validation.dual_uniqueness_guaranteed,
        measurability_checked,
    };
    let certificate = EquilibriumCertificate {
        triple: TripleRecord::from(triple),
        lambda,
        values,
        residuals,
        flags,
        meta: Meta {
            config_hash: opts.config_hash.clone(),
            version: env!("CARGO_PKG_VERSION").to_string(),
        },
    };
    Ok((certificate, report))
}

/// Re-verifies a certificate from its recorded triple and `lambda` alone.
///
/// Structural mismatches with the instance are errors; everything else,
/// including an unnormalized pricing vector, yields a failing report.
pub fn check_certificate(
    cert: &EquilibriumCertificate,
    space: &ScenarioSpace,
    x: &Allocation,
    u: &UtilitySpec,
    partition: &ClusterPartition,
    cfg: &SolverConfig,
) -> Result<CheckReport> {
    let (n, m) = (x.n_agents(), space.len());
    let rec = &cert.triple;
    if rec.a.len() != n || rec.y_tilde.len() != n || rec.q_density.len() != n {
        return Err(Error::Dimension(format!(
            "certificate does not describe {n} agents"
        )));
    }
    if rec
        .y_tilde
        .iter()
        .chain(&rec.q_density)
        .any(|r| r.len() != m)
    {
        return Err(Error::Dimension(format!(
            "certificate rows must have {m} scenarios"
        )));
    }
    let y_tilde = Allocation::from_rows(&rec.y_tilde)?;
    let densities = Allocation::from_rows(&rec.q_density)?;

    let mut structural = CheckReport { items: Vec::new() };
    let norm = (0..n).fold(0.0f64, |acc, j| {
        acc.max((space.expect(densities.row(j)) - 1.0).abs())
    });
    structural.at_most("density_normalization", norm, 1e-10);
    let min = densities
        .as_slice()
        .iter()
        .fold(f64::INFINITY, |acc, v| acc.min(*v));
    structural.items.push(CheckItem {
        name: "density_positive",
        value: min,
        tolerance: 0.0,
        passed: min > 0.0,
    });
    if !structural.passed() {
        return Ok(structural);
    }

    let triple = EquilibriumTriple {
        y_tilde,
        q: PricingVector::new(space, densities)?,
        a: rec.a.clone(),
        budget: rec.budget,
    };
    let inst = Instance {
        space,
        x,
        u,
        partition,
        cfg,
    };
    let fairness = (
        CertifyOptions::default().fairness_samples,
        CertifyOptions::default().fairness_seed,
    );
    let (_, mut report, _) = evaluate(&inst, &triple, cert.lambda, &cert.values, fairness)?;
    report.items.retain(|i| i.name != "density_positive");
    structural.items.append(&mut report.items);
    Ok(structural)
}
