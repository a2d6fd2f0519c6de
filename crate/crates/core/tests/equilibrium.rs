mod common;

use common::{exp_instance, max_abs, random_allocation, random_space, tied_instance};
use msorte::equilibrium::{
    certify, check_certificate, fairness_min_slack, verify_buhlmann, verify_measurability,
    verify_nash, CertifyOptions, EquilibriumTriple,
};
use msorte::scenario::{expectation, Allocation, ClusterPartition, ScenarioSpace};
use msorte::solver::SolverConfig;
use msorte::utility::{Aggregator, UtilitySpec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn run(
    space: &ScenarioSpace,
    x: &Allocation,
    u: &UtilitySpec,
    budget: f64,
    partition: &ClusterPartition,
) -> msorte::equilibrium::Certification {
    certify(
        space,
        x,
        u,
        budget,
        partition,
        &SolverConfig::default(),
        &CertifyOptions::default(),
    )
    .unwrap()
}

fn assert_passes(c: &msorte::equilibrium::Certification) {
    let failures: Vec<_> = c.report.failures().collect();
    assert!(failures.is_empty(), "failed checks: {failures:?}");
}

#[test]
fn symmetric_zero_endowment_splits_budget_evenly() {
    let space = ScenarioSpace::uniform(4).unwrap();
    let x = Allocation::zeros(3, 4);
    let u = UtilitySpec::exp_pairwise(vec![1.0; 3]).unwrap();
    let c = run(&space, &x, &u, 1.5, &ClusterPartition::single(3));
    assert_passes(&c);
    for a in &c.triple.a {
        assert!((a - 0.5).abs() < 1e-12);
    }
    assert!(max_abs(c.triple.y_tilde.as_slice()) < 1e-12);
    assert!(c
        .triple
        .q
        .densities()
        .as_slice()
        .iter()
        .all(|d| (d - 1.0).abs() < 1e-12));
    assert!(c.certificate.residuals.nash_max_improvement <= 1e-9);
}

#[test]
fn single_agent_keeps_budget_and_trades_nothing() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let space = random_space(&mut rng, 5);
    let x = random_allocation(&mut rng, 1, 5, 2.0);
    let u = UtilitySpec::exp_pairwise(vec![1.3]).unwrap();
    let c = run(&space, &x, &u, 0.7, &ClusterPartition::single(1));
    assert_passes(&c);
    assert!((c.triple.a[0] - 0.7).abs() < 1e-12);
    assert!(max_abs(c.triple.y_tilde.as_slice()) < 1e-12);
}

#[test]
fn random_exponential_instances_certify() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for (n, m) in [(2, 3), (3, 10), (5, 7)] {
        let inst = exp_instance(&mut rng, n, m);
        let c = run(
            &inst.space,
            &inst.x,
            &inst.u,
            inst.budget,
            &ClusterPartition::single(n),
        );
        assert_passes(&c);
        let r = &c.certificate.residuals;
        assert!(r.clearing_max <= 1e-10);
        assert!(r.budget_expectation_max <= 1e-8);
        assert!(r.nash_max_improvement <= 1e-7 * c.certificate.values.primal.abs().max(1.0));
        assert!(r.oracle_max_deviation.unwrap() <= 1e-7);
        assert!(c.certificate.flags.oracle_checked && c.certificate.flags.unique);
        let sum_a: f64 = c.triple.a.iter().sum();
        assert!((sum_a - inst.budget).abs() <= 1e-10);
    }
}

#[test]
fn perturbed_exchange_is_not_nash() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let inst = exp_instance(&mut rng, 3, 6);
    let c = run(
        &inst.space,
        &inst.x,
        &inst.u,
        inst.budget,
        &ClusterPartition::single(3),
    );
    let mut t = c.triple.clone();
    let noise = random_allocation(&mut rng, 3, 6, 1e-2);
    t.y_tilde = t.y_tilde.add(&noise).unwrap();
    let report = verify_nash(&t, &inst.space, &inst.x, &inst.u, &SolverConfig::default()).unwrap();
    assert!(
        report.max_improvement > 1e-7,
        "improvement {}",
        report.max_improvement
    );
}

#[test]
fn nash_check_is_exact_against_separable_reference() {
    // For SUM_EXP the agent's deviation problem is univariate and has a closed
    // form: with position x = c + Z - E_Q[Z], the optimum satisfies
    // alpha e^{-alpha x_w} = nu q_w, so x_w = -(ln q_w)/alpha + const, and the
    // constant is fixed by E_Q[x] = E_Q[c].
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let space = random_space(&mut rng, 5);
    let x = random_allocation(&mut rng, 2, 5, 1.0);
    let u = UtilitySpec::sum_exp(vec![1.5, 0.8]).unwrap();
    let c = run(&space, &x, &u, 0.3, &ClusterPartition::single(2));
    // Start every agent from Y~ = 0 so the gain is substantial.
    let t = EquilibriumTriple {
        y_tilde: Allocation::zeros(2, 5),
        ..c.triple.clone()
    };
    let report = verify_nash(&t, &space, &x, &u, &SolverConfig::default()).unwrap();
    for j in 0..2 {
        let alpha = u.alpha()[j];
        let q = t.q.row(j);
        let base: Vec<f64> = (0..5).map(|w| x.get(j, w) + t.a[j]).collect();
        let eq = |v: &[f64]| (0..5).map(|w| space.probs()[w] * q[w] * v[w]).sum::<f64>();
        let shape: Vec<f64> = q.iter().map(|qw| -qw.ln() / alpha).collect();
        let shift = eq(&base) - eq(&shape);
        let best: f64 = (0..5)
            .map(|w| space.probs()[w] * (1.0 - (-alpha * (shape[w] + shift)).exp()))
            .sum();
        let current: f64 = (0..5)
            .map(|w| space.probs()[w] * (1.0 - (-alpha * base[w]).exp()))
            .sum();
        assert!(
            (report.improvements[j] - (best - current)).abs() < 1e-12,
            "agent {j}"
        );
    }
}

#[test]
fn sum_exp_satisfies_buhlmann_conditions() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let space = random_space(&mut rng, 8);
    let x = random_allocation(&mut rng, 3, 8, 2.0);
    let u = UtilitySpec::sum_exp(vec![0.7, 1.4, 2.5]).unwrap();
    let partition = ClusterPartition::single(3);
    let c = run(&space, &x, &u, -0.4, &partition);
    assert_passes(&c);
    let report = verify_buhlmann(
        &c.triple,
        &space,
        &x,
        &u,
        &partition,
        &SolverConfig::default(),
    )
    .unwrap();
    assert!(report.clearing_max <= 1e-10);
    assert!(report.pricing_spread_max <= 1e-12);
    assert!(report.individual_max().unwrap() <= 1e-7);
}

#[test]
fn clusters_price_alike_only_within_groups() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let space = random_space(&mut rng, 6);
    let x = random_allocation(&mut rng, 4, 6, 2.0);
    let u = UtilitySpec::exp_pairwise(vec![1.0, 2.0, 0.7, 1.5]).unwrap();
    let partition = ClusterPartition::new(vec![vec![0, 2], vec![1, 3]], 4).unwrap();
    let c = run(&space, &x, &u, 0.5, &partition);
    assert_passes(&c);
    let q = &c.triple.q;
    let spread = |a: usize, b: usize| {
        (0..6).fold(0.0f64, |m, w| {
            m.max((q.density(a, w) - q.density(b, w)).abs())
        })
    };
    assert!(spread(0, 2) <= 1e-12 && spread(1, 3) <= 1e-12);
    assert!(spread(0, 1) > 1e-6);
    let meas = verify_measurability(&c.triple, &x, &u, &partition).unwrap();
    assert!(!meas.checked && meas.reason.is_some());
    assert!(c.certificate.residuals.oracle_max_deviation.is_none());
}

#[test]
fn deterministic_aggregate_gives_flat_density() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let space = random_space(&mut rng, 5);
    let mut x = random_allocation(&mut rng, 3, 5, 2.0);
    for w in 0..5 {
        let s = x.get(0, w) + x.get(1, w);
        x.set(2, w, 1.0 - s);
    }
    let u = UtilitySpec::exp_pairwise(vec![0.9, 1.1, 2.0]).unwrap();
    let partition = ClusterPartition::single(3);
    let c = run(&space, &x, &u, 0.0, &partition);
    let meas = verify_measurability(&c.triple, &x, &u, &partition).unwrap();
    assert!(meas.checked);
    assert_eq!(meas.level_sets, 1);
    assert!(meas.density_spread <= 1e-12);
}

#[test]
fn tied_aggregates_give_measurable_equilibria() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let inst = tied_instance(&mut rng, 3, 3, 3);
    let partition = ClusterPartition::single(3);
    let c = run(&inst.space, &inst.x, &inst.u, inst.budget, &partition);
    let meas = verify_measurability(&c.triple, &inst.x, &inst.u, &partition).unwrap();
    assert_eq!(meas.level_sets, 3);
    assert!(meas.max_spread() <= 1e-8, "{meas:?}");
}

#[test]
fn fairness_holds_for_sampled_feasible_exchanges() {
    let mut rng = ChaCha8Rng::seed_from_u64(29);
    let inst = exp_instance(&mut rng, 3, 10);
    let partition = ClusterPartition::single(3);
    let c = run(&inst.space, &inst.x, &inst.u, inst.budget, &partition);
    let slack = fairness_min_slack(&c.triple, &inst.space, &partition, 2000, 1).unwrap();
    assert!(slack >= -1e-9);
}

#[test]
fn aggregator_family_certifies() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let space = random_space(&mut rng, 6);
    let x = random_allocation(&mut rng, 3, 6, 1.5);
    for agg in [
        Aggregator::Exponential { p: 0.8 },
        Aggregator::Rational { p: 2.0 },
        Aggregator::Arctan { p: 1.5 },
    ] {
        let u = UtilitySpec::sum_plus_agg(vec![1.0, 1.5, 0.6], vec![0.5, 0.0, 1.0], agg).unwrap();
        let c = run(&space, &x, &u, 0.2, &ClusterPartition::single(3));
        assert_passes(&c);
        assert!(!c.certificate.flags.oracle_checked);
    }
}

#[test]
fn kink_family_is_flagged_approximate() {
    let mut rng = ChaCha8Rng::seed_from_u64(37);
    let space = random_space(&mut rng, 4);
    let x = random_allocation(&mut rng, 2, 4, 1.0);
    let u = UtilitySpec::sum_exp_plus_kink(vec![1.0, 1.5], vec![0.5, 0.3], vec![0.0, -0.2], 1.0)
        .unwrap();
    let c = run(&space, &x, &u, 0.1, &ClusterPartition::single(2));
    assert_passes(&c);
    let f = &c.certificate.flags;
    assert!(f.approximate && !f.differentiable && !f.dual_unique && !f.unique);
}

#[test]
fn perturbed_initializations_reach_the_same_triple() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let inst = exp_instance(&mut rng, 4, 12);
    let partition = ClusterPartition::single(4);
    let base = run(&inst.space, &inst.x, &inst.u, inst.budget, &partition);
    for seed in 1..=3 {
        let cfg = SolverConfig {
            init_jitter: 0.5,
            init_seed: seed,
            ..SolverConfig::default()
        };
        let c = certify(
            &inst.space,
            &inst.x,
            &inst.u,
            inst.budget,
            &partition,
            &cfg,
            &CertifyOptions::default(),
        )
        .unwrap();
        assert!(c.triple.y_tilde.max_abs_diff(&base.triple.y_tilde) <= 1e-7);
        assert!(
            c.triple
                .q
                .densities()
                .max_abs_diff(base.triple.q.densities())
                <= 1e-7
        );
        let da = c
            .triple
            .a
            .iter()
            .zip(&base.triple.a)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        assert!(da <= 1e-7);
    }
}

mod check {
    use super::*;

    fn fixture() -> (common::Instance, msorte::equilibrium::Certification) {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let inst = exp_instance(&mut rng, 3, 8);
        let c = run(
            &inst.space,
            &inst.x,
            &inst.u,
            inst.budget,
            &ClusterPartition::single(3),
        );
        (inst, c)
    }

    fn check(
        inst: &common::Instance,
        cert: &msorte::equilibrium::EquilibriumCertificate,
    ) -> msorte::equilibrium::CheckReport {
        check_certificate(
            cert,
            &inst.space,
            &inst.x,
            &inst.u,
            &ClusterPartition::single(inst.x.n_agents()),
            &SolverConfig::default(),
        )
        .unwrap()
    }

    fn failed(report: &msorte::equilibrium::CheckReport) -> Vec<&'static str> {
        report.failures().map(|i| i.name).collect()
    }

    #[test]
    fn fresh_certificate_passes() {
        let (inst, c) = fixture();
        let report = check(&inst, &c.certificate);
        assert!(report.passed(), "{:?}", failed(&report));
    }

    #[test]
    fn shifted_capital_fails() {
        let (inst, mut c) = fixture();
        c.certificate.triple.a[0] += 1e-3;
        let report = check(&inst, &c.certificate);
        let names = failed(&report);
        assert!(names.contains(&"budget_sum_error"), "{names:?}");
    }

    #[test]
    fn zero_lambda_fails() {
        let (inst, mut c) = fixture();
        c.certificate.lambda = 0.0;
        let names = failed(&check(&inst, &c.certificate));
        assert!(names.contains(&"lambda_positive"), "{names:?}");
        assert!(names.contains(&"fixed_q_consistency"), "{names:?}");
    }

    #[test]
    fn unnormalized_density_fails() {
        let (inst, mut c) = fixture();
        c.certificate.triple.q_density[1][0] *= 1.01;
        let names = failed(&check(&inst, &c.certificate));
        assert_eq!(names, vec!["density_normalization"]);
    }

    #[test]
    fn tampered_exchange_fails() {
        let (inst, mut c) = fixture();
        c.certificate.triple.y_tilde[0][2] += 1e-4;
        c.certificate.triple.y_tilde[1][2] -= 1e-4;
        assert!(!check(&inst, &c.certificate).passed());
    }

    #[test]
    fn zero_mean_normalization_is_recorded() {
        let (inst, c) = fixture();
        let e = expectation(&inst.space, &c.triple.y_tilde, &c.triple.q).unwrap();
        assert!(max_abs(&e) <= 1e-8);
    }
}
