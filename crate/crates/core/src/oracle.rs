//! Closed-form equilibrium for the `EXP_PAIRWISE` family, used as an
//! independent test oracle once [`self_validate`] has confirmed its constants.
//!
//! With `beta = sum 1/alpha_j`, `Gamma = sum (1/alpha_j) ln(1/alpha_j)` and
//! `Xbar = sum_j X^j`:
//!
//! * `dQ/dP = exp(-2 Xbar/beta) / E[exp(-2 Xbar/beta)]`, common to all agents;
//! * `Y^j = -X^j + Xbar/(beta alpha_j) + kappa^j` with
//!   `kappa^j = (A + Gamma)/(alpha_j beta) - (1/alpha_j) ln(1/alpha_j)`, so `sum_j kappa^j = A`;
//! * `ln lambda = ln beta - 2 (A + Gamma)/beta + ln E[exp(-2 Xbar/beta)]`.
//!
//! The literature form of `lambda` carries an extra `+beta` inside the
//! bracket of the exponent, i.e. it is smaller by `e^{-2}`; the two
//! candidates are kept side by side so the arbitration is reproducible.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scenario::{Allocation, ClusterPartition, PricingVector, ScenarioSpace};
use crate::solver::{solve_dual, solve_fixed_q_dual, SolverConfig};
use crate::utility::UtilitySpec;

#[derive(Debug, Clone)]
pub struct ExponentialInstance {
    pub alpha: Vec<f64>,
    pub beta: f64,
    pub gamma: f64,
    pub x: Allocation,
    pub budget: f64,
}

impl ExponentialInstance {
    pub fn new(alpha: Vec<f64>, x: Allocation, budget: f64) -> Result<Self> {
        UtilitySpec::exp_pairwise(alpha.clone())?;
        if x.n_agents() != alpha.len() {
            return Err(Error::Dimension(format!(
                "{} alphas for {} agents",
                alpha.len(),
                x.n_agents()
            )));
        }
        if !budget.is_finite() {
            return Err(Error::Invalid("budget must be finite".into()));
        }
        let beta = alpha.iter().map(|a| 1.0 / a).sum();
        let gamma = alpha.iter().map(|a| (1.0 / a) * (1.0 / a).ln()).sum();
        Ok(ExponentialInstance {
            alpha,
            beta,
            gamma,
            x,
            budget,
        })
    }

    /// Instance described by an `EXP_PAIRWISE` utility; other families are rejected.
    pub fn from_utility(u: &UtilitySpec, x: Allocation, budget: f64) -> Result<Self> {
        match u {
            UtilitySpec::ExpPairwise { alpha } => Self::new(alpha.clone(), x, budget),
            other => Err(Error::Unsupported(format!(
                "closed form only exists for EXP_PAIRWISE, not {}",
                other.family()
            ))),
        }
    }

    pub fn utility(&self) -> UtilitySpec {
        UtilitySpec::ExpPairwise {
            alpha: self.alpha.clone(),
        }
    }

    /// Exponent `-2 Xbar/beta` per scenario with its max, and `ln E[exp(.)]`.
    fn tilt(&self, space: &ScenarioSpace) -> (Vec<f64>, f64, f64) {
        let logs: Vec<f64> = self
            .x
            .aggregate()
            .iter()
            .map(|s| -2.0 * s / self.beta)
            .collect();
        let top = logs.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v));
        let mass = space.expect_with(|w| (logs[w] - top).exp());
        (logs, top, top + mass.ln())
    }

    pub fn kappa(&self) -> Vec<f64> {
        self.alpha
            .iter()
            .map(|a| (self.budget + self.gamma) / (a * self.beta) - (1.0 / a) * (1.0 / a).ln())
            .collect()
    }
}

/// Normalized exponential tilt of the aggregate endowment, computed in log space.
pub fn oracle_density(space: &ScenarioSpace, inst: &ExponentialInstance) -> Result<PricingVector> {
    let (logs, _, log_mass) = inst.tilt(space);
    let density: Vec<f64> = logs.iter().map(|l| (l - log_mass).exp()).collect();
    PricingVector::common(space, inst.alpha.len(), &density)
}

pub fn oracle_allocation(inst: &ExponentialInstance) -> Allocation {
    let xbar = inst.x.aggregate();
    let kappa = inst.kappa();
    let (n, m) = (inst.x.n_agents(), inst.x.n_scenarios());
    let mut y = Allocation::zeros(n, m);
    for (j, (a, k)) in inst.alpha.iter().zip(&kappa).enumerate() {
        let share = 1.0 / (inst.beta * a);
        for (w, s) in xbar.iter().enumerate() {
            y.set(j, w, -inst.x.get(j, w) + share * s + k);
        }
    }
    y
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaConstant {
    /// Literature form, with `+beta` inside the exponent's bracket.
    Printed,
    /// Re-derived from the conjugate's definition.
    Corrected,
}

/// Constant adopted after arbitration against the numeric fixed-`Q` dual.
pub const ADOPTED_LAMBDA: LambdaConstant = LambdaConstant::Corrected;

pub fn oracle_lambda(
    space: &ScenarioSpace,
    inst: &ExponentialInstance,
    constant: LambdaConstant,
) -> f64 {
    let (_, _, log_mass) = inst.tilt(space);
    let b = inst.beta;
    let extra = match constant {
        LambdaConstant::Printed => b,
        LambdaConstant::Corrected => 0.0,
    };
    (-(2.0 / b) * (inst.budget + extra + inst.gamma - 0.5 * b * b.ln() - 0.5 * b * log_mass)).exp()
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct SelfValidation {
    pub instances: usize,
    /// Worst relative spread of the gradient across agents at the oracle allocation.
    pub kkt_max: f64,
    pub clearing_max: f64,
    pub density_max: f64,
    pub lambda_rel_printed_max: f64,
    pub lambda_rel_corrected_max: f64,
    /// Mean of `printed / numeric`.
    pub printed_factor: f64,
    pub adopted: Option<LambdaConstant>,
    pub adversarial_passed: bool,
    pub log: Vec<String>,
}

impl SelfValidation {
    pub fn passed(&self) -> bool {
        self.adopted.is_some()
            && self.kkt_max <= 1e-9
            && self.density_max <= 1e-8
            && self.clearing_max <= 1e-12
            && self.adversarial_passed
    }
}

fn random_instance(
    rng: &mut ChaCha8Rng,
    alpha_range: (f64, f64),
) -> (ScenarioSpace, ExponentialInstance) {
    let n = rng.gen_range(1..=5);
    let m = rng.gen_range(2..=20);
    let raw: Vec<f64> = (0..m).map(|_| rng.gen_range(0.2..1.0)).collect();
    let total: f64 = raw.iter().sum();
    let mut probs: Vec<f64> = raw.iter().map(|p| p / total).collect();
    let head: f64 = probs[..m - 1].iter().sum();
    probs[m - 1] = 1.0 - head;
    let space = ScenarioSpace::new((0..m).map(|i| format!("s{i}")).collect(), probs)
        .expect("valid probabilities");
    let alpha: Vec<f64> = (0..n)
        .map(|_| {
            let (lo, hi) = alpha_range;
            (rng.gen_range(lo.ln()..hi.ln())).exp()
        })
        .collect();
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..m).map(|_| rng.gen_range(-2.0..2.0)).collect())
        .collect();
    let budget = rng.gen_range(-1.0..1.0);
    let inst =
        ExponentialInstance::new(alpha, Allocation::from_rows(&rows).unwrap(), budget).unwrap();
    (space, inst)
}

struct Check {
    kkt: f64,
    clearing: f64,
    density: f64,
    lambda_num: f64,
    printed: f64,
    corrected: f64,
}

fn check_instance(
    space: &ScenarioSpace,
    inst: &ExponentialInstance,
    cfg: &SolverConfig,
) -> Result<Check> {
    let u = inst.utility();
    let n = inst.alpha.len();
    let y = oracle_allocation(inst);
    let mut kkt: f64 = 0.0;
    let mut clearing: f64 = 0.0;
    for w in 0..space.len() {
        let xi: Vec<f64> = (0..n).map(|j| inst.x.get(j, w) + y.get(j, w)).collect();
        let g = u.gradient(&xi)?;
        let mean = g.iter().sum::<f64>() / n as f64;
        kkt = kkt.max(g.iter().fold(0.0f64, |m, v| m.max((v - mean).abs())) / mean);
        clearing = clearing.max((y.column(w).iter().sum::<f64>() - inst.budget).abs());
    }
    let q = oracle_density(space, inst)?;
    let dual = solve_dual(
        space,
        &inst.x,
        &u,
        inst.budget,
        &ClusterPartition::single(n),
        cfg,
    )?;
    let density = q.densities().max_abs_diff(dual.q_hat.densities());
    let fixed = solve_fixed_q_dual(space, &inst.x, &u, inst.budget, &q, cfg)?;
    Ok(Check {
        kkt,
        clearing,
        density,
        lambda_num: fixed.lambda,
        printed: oracle_lambda(space, inst, LambdaConstant::Printed),
        corrected: oracle_lambda(space, inst, LambdaConstant::Corrected),
    })
}

/// Arbitrates the oracle's constants against the numeric solvers on 50
/// random instances plus one badly conditioned instance.
pub fn self_validate(seed: u64) -> SelfValidation {
    let cfg = SolverConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = SelfValidation {
        instances: 0,
        kkt_max: 0.0,
        clearing_max: 0.0,
        density_max: 0.0,
        lambda_rel_printed_max: 0.0,
        lambda_rel_corrected_max: 0.0,
        printed_factor: 0.0,
        adopted: None,
        adversarial_passed: false,
        log: Vec::new(),
    };
    let mut factor_sum = 0.0;
    for i in 0..50 {
        let (space, inst) = random_instance(&mut rng, (0.5, 3.0));
        match check_instance(&space, &inst, &cfg) {
            Ok(c) => {
                report.instances += 1;
                report.kkt_max = report.kkt_max.max(c.kkt);
                report.clearing_max = report.clearing_max.max(c.clearing);
                report.density_max = report.density_max.max(c.density);
                report.lambda_rel_printed_max = report
                    .lambda_rel_printed_max
                    .max((c.printed / c.lambda_num - 1.0).abs());
                report.lambda_rel_corrected_max = report
                    .lambda_rel_corrected_max
                    .max((c.corrected / c.lambda_num - 1.0).abs());
                factor_sum += c.printed / c.lambda_num;
            }
            Err(e) => report
                .log
                .push(format!("instance {i}: numeric solve failed: {e}")),
        }
    }
    report.printed_factor = factor_sum / report.instances.max(1) as f64;
    if report.instances == 50 {
        report.adopted = if report.lambda_rel_corrected_max <= 1e-8 {
            Some(LambdaConstant::Corrected)
        } else if report.lambda_rel_printed_max <= 1e-8 {
            Some(LambdaConstant::Printed)
        } else {
            None
        };
    }
    match report.adopted {
        Some(c) => report.log.push(format!(
            "adopted {c:?} lambda constant; printed/numeric = {:.12} (e^-2 = {:.12})",
            report.printed_factor,
            (-2.0f64).exp()
        )),
        None => report
            .log
            .push("ORACLE DISABLED: no lambda constant matches the numeric dual".into()),
    }

    let (space, mut inst) = random_instance(&mut rng, (0.5, 3.0));
    let n = inst.alpha.len().max(2);
    if inst.alpha.len() < 2 {
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..space.len()).map(|_| rng.gen_range(-2.0..2.0)).collect())
            .collect();
        inst = ExponentialInstance::new(
            vec![1.0; n],
            Allocation::from_rows(&rows).unwrap(),
            inst.budget,
        )
        .unwrap();
    }
    let mut alpha = inst.alpha.clone();
    alpha[0] = 0.01;
    alpha[1] = 10.0;
    let adversarial = ExponentialInstance::new(alpha, inst.x.clone(), inst.budget).unwrap();
    report.adversarial_passed = match check_instance(&space, &adversarial, &cfg) {
        Ok(c) => {
            let lambda_ok = match report.adopted {
                Some(LambdaConstant::Printed) => (c.printed / c.lambda_num - 1.0).abs() <= 1e-6,
                Some(LambdaConstant::Corrected) => (c.corrected / c.lambda_num - 1.0).abs() <= 1e-6,
                None => false,
            };
            report.log.push(format!(
                "adversarial alpha spread 1e3: kkt {:.2e}, density {:.2e}, lambda ok {lambda_ok}",
                c.kkt, c.density
            ));
            c.kkt <= 1e-6 && c.density <= 1e-6 && lambda_ok
        }
        Err(e) => {
            report.log.push(format!("adversarial instance failed: {e}"));
            false
        }
    };
    report
}
