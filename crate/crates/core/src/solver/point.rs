use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::kink::polish;
use crate::optim::{maximize_constrained, nelder_mead, NelderMeadOptions, NewtonOptions};
use crate::utility::UtilitySpec;

use super::SolverConfig;

/// Optimum of `max U(x + y)` subject to `sum_{i in G} y_i = b_G` for each cluster `G`.
#[derive(Debug, Clone)]
pub struct PointSolution {
    pub y: Vec<f64>,
    pub value: f64,
    /// One multiplier per cluster.
    pub multipliers: Vec<f64>,
    /// Hessian of the optimal value with respect to the cluster budgets.
    pub value_hessian: Option<DMatrix<f64>>,
    pub approximate: bool,
}

/// Single-cluster specialization of [`PointSolution`].
#[derive(Debug, Clone)]
pub struct ScenarioSolution {
    pub y: Vec<f64>,
    pub multiplier: f64,
    pub value: f64,
    pub approximate: bool,
}

/// Maximizes `U(x + y)` subject to `sum_j y_j = budget`.
pub fn solve_scenario(
    x: &[f64],
    budget: f64,
    u: &UtilitySpec,
    cfg: &SolverConfig,
) -> Result<ScenarioSolution> {
    let groups = vec![(0..x.len()).collect::<Vec<_>>()];
    let p = solve_point(u, x, &groups, &[budget], cfg, None)?;
    Ok(ScenarioSolution {
        y: p.y,
        multiplier: p.multipliers[0],
        value: p.value,
        approximate: p.approximate,
    })
}

/// Cluster-constrained per-scenario problem from the equal split, or from
/// `warm` (re-projected onto the budgets) when given.
pub fn solve_point(
    u: &UtilitySpec,
    x: &[f64],
    groups: &[Vec<usize>],
    budgets: &[f64],
    cfg: &SolverConfig,
    warm: Option<&[f64]>,
) -> Result<PointSolution> {
    solve_point_with(u, x, groups, budgets, cfg, warm, false, 0)
}

fn start_point(
    x: &[f64],
    groups: &[Vec<usize>],
    budgets: &[f64],
    cfg: &SolverConfig,
    warm: Option<&[f64]>,
    stream: u64,
) -> Vec<f64> {
    let mut rng = cfg.jitter_rng(stream);
    let mut y = vec![0.0; x.len()];
    for (g, b) in groups.iter().zip(budgets) {
        let size = g.len() as f64;
        if g.len() == 1 {
            y[g[0]] = *b;
            continue;
        }
        match warm {
            Some(w) => {
                let drift = (g.iter().map(|&i| w[i]).sum::<f64>() - b) / size;
                for &i in g {
                    y[i] = w[i] - drift;
                }
            }
            None => {
                let level = (b + g.iter().map(|&i| x[i]).sum::<f64>()) / size;
                for &i in g {
                    y[i] = level - x[i];
                }
            }
        }
        if rng.is_some() {
            let noise: Vec<f64> = g.iter().map(|_| cfg.jitter(&mut rng)).collect();
            let mean = noise.iter().sum::<f64>() / size;
            for (&i, e) in g.iter().zip(&noise) {
                y[i] += e - mean;
            }
        }
    }
    y
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn solve_point_with(
    u: &UtilitySpec,
    x: &[f64],
    groups: &[Vec<usize>],
    budgets: &[f64],
    cfg: &SolverConfig,
    warm: Option<&[f64]>,
    want_hessian: bool,
    stream: u64,
) -> Result<PointSolution> {
    let y0 = start_point(x, groups, budgets, cfg, warm, stream);
    let shifted = |y: &[f64]| -> Vec<f64> { x.iter().zip(y).map(|(a, b)| a + b).collect() };

    if !u.is_differentiable() {
        return solve_point_derivative_free(u, x, groups, &y0);
    }

    let opts = NewtonOptions {
        tol: cfg.newton_tol,
        max_iter: cfg.max_iter,
        grad_scale: None,
        scale_floor: f64::MIN_POSITIVE,
    };
    let r = maximize_constrained(
        |y| u.evaluate(&shifted(y)),
        |y| u.grad_hess(&shifted(y)),
        &y0,
        groups,
        &opts,
    )?;
    let value_hessian = if want_hessian {
        Some(budget_hessian(&r.hess, groups)?)
    } else {
        None
    };
    Ok(PointSolution {
        y: r.x,
        value: r.value,
        multipliers: r.multipliers,
        value_hessian,
        approximate: false,
    })
}

/// `(C H^{-1} C^T)^{-1}` for the group incidence matrix `C`.
fn budget_hessian(hess: &DMatrix<f64>, groups: &[Vec<usize>]) -> Result<DMatrix<f64>> {
    let n = hess.nrows();
    let k = groups.len();
    let mut ct = DMatrix::zeros(n, k);
    for (g, members) in groups.iter().enumerate() {
        for &i in members {
            ct[(i, g)] = 1.0;
        }
    }
    let solved = hess.clone().lu().solve(&ct).ok_or_else(|| {
        Error::Assembly("singular utility Hessian at the scenario optimum".into())
    })?;
    (ct.transpose() * solved)
        .try_inverse()
        .ok_or_else(|| Error::Assembly("singular budget curvature".into()))
}

/// Simplex search in the reduced coordinates `y = y0 + sum r_i (e_i - e_{g0})`.
fn solve_point_derivative_free(
    u: &UtilitySpec,
    x: &[f64],
    groups: &[Vec<usize>],
    y0: &[f64],
) -> Result<PointSolution> {
    let moves: Vec<(usize, usize)> = groups
        .iter()
        .flat_map(|g| g[1..].iter().map(move |&i| (i, g[0])))
        .collect();
    let assemble = |r: &[f64]| -> Vec<f64> {
        let mut y = y0.to_vec();
        for (&(i, base), ri) in moves.iter().zip(r) {
            y[i] += ri;
            y[base] -= ri;
        }
        y
    };
    let objective = |r: &[f64]| {
        let y = assemble(r);
        let xy: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a + b).collect();
        -u.evaluate(&xy)
    };
    let opts = NelderMeadOptions {
        initial_step: 0.5,
        tol: 1e-12,
        max_evals: 50_000 * (1 + moves.len()),
        restarts: 4,
    };
    let res = nelder_mead(objective, &vec![0.0; moves.len()], &opts);
    if !res.value.is_finite() {
        return Err(Error::non_convergence(
            "simplex search",
            res.evaluations,
            res.value,
            &res.x,
        ));
    }
    let y = assemble(&res.x);
    let xy: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a + b).collect();
    let zero = vec![0.0; x.len()];
    if let Some(p) = polish(u, &xy, &zero, groups, &vec![true; x.len()]) {
        let value = u.evaluate(&p.x);
        // The simplex value can exceed the exact optimum by rounding only.
        if value >= -res.value - 1e-12 * (1.0 + res.value.abs()) {
            return Ok(PointSolution {
                y: p.x.iter().zip(x).map(|(a, b)| a - b).collect(),
                value,
                multipliers: p.multipliers,
                value_hessian: None,
                approximate: true,
            });
        }
    }
    let multipliers = groups
        .iter()
        .map(|g| {
            let mut lo = f64::NEG_INFINITY;
            let mut hi = f64::INFINITY;
            for &j in g {
                let (left, right) = u.one_sided_partials(&xy, j);
                lo = lo.max(right);
                hi = hi.min(left);
            }
            0.5 * (lo + hi)
        })
        .collect();
    Ok(PointSolution {
        y,
        value: -res.value,
        multipliers,
        value_hessian: None,
        approximate: true,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::utility::Aggregator;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn symmetric_split() {
        let u = UtilitySpec::exp_pairwise(vec![1.0, 1.0]).unwrap();
        for a in [-1.0, 0.0, 2.5] {
            let s = solve_scenario(&[0.0, 0.0], a, &u, &SolverConfig::default()).unwrap();
            assert!((s.y[0] - a / 2.0).abs() < 1e-14 && (s.y[1] - a / 2.0).abs() < 1e-14);
        }
    }

    #[test]
    fn single_agent_takes_everything() {
        let u = UtilitySpec::exp_pairwise(vec![1.7]).unwrap();
        let s = solve_scenario(&[0.3], -0.8, &u, &SolverConfig::default()).unwrap();
        assert_eq!(s.y, vec![-0.8]);
    }

    #[test]
    fn pairwise_stationarity_structure() {
        // At the optimum alpha_j e^{-alpha_j xi_j} S = mu, so xi_j = (ln alpha_j - ln c)/alpha_j
        // for a common constant c = mu / S.
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..200 {
            let n = rng.gen_range(2..6);
            let alpha: Vec<f64> = (0..n).map(|_| rng.gen_range(0.5..3.0)).collect();
            let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let budget = rng.gen_range(-1.0..1.0);
            let u = UtilitySpec::exp_pairwise(alpha.clone()).unwrap();
            let s = solve_scenario(&x, budget, &u, &SolverConfig::default()).unwrap();
            let logs: Vec<f64> = (0..n)
                .map(|j| alpha[j].ln() - alpha[j] * (x[j] + s.y[j]))
                .collect();
            for l in &logs {
                assert!((l - logs[0]).abs() < 1e-10);
            }
            assert!((s.y.iter().sum::<f64>() - budget).abs() < 1e-12);
            let g = u
                .gradient(&x.iter().zip(&s.y).map(|(a, b)| a + b).collect::<Vec<_>>())
                .unwrap();
            for gj in g {
                assert!((gj - s.multiplier).abs() <= 1e-10 * s.multiplier);
            }
        }
    }

    #[test]
    fn two_agent_grid_search_oracle() {
        let u = UtilitySpec::sum_plus_agg(
            vec![0.8, 2.0],
            vec![0.5, 1.0],
            Aggregator::Arctan { p: 2.0 },
        )
        .unwrap();
        let x = [0.4, -1.1];
        let s = solve_scenario(&x, 0.3, &u, &SolverConfig::default()).unwrap();
        let f = |t: f64| u.evaluate(&[x[0] + t, x[1] + 0.3 - t]);
        let (t, _) = crate::optim::scalar::golden_section(|t| -f(t), -5.0, 5.0, 1e-14, 500);
        assert!((s.y[0] - t).abs() < 1e-7);
    }

    #[test]
    fn clusters_respect_each_budget() {
        let u = UtilitySpec::exp_pairwise(vec![1.0, 2.0, 0.5, 1.5]).unwrap();
        let groups = vec![vec![0, 2], vec![1, 3]];
        let p = solve_point_with(
            &u,
            &[0.1, -0.4, 1.0, 0.0],
            &groups,
            &[0.5, -0.2],
            &SolverConfig::default(),
            None,
            true,
            0,
        )
        .unwrap();
        assert!((p.y[0] + p.y[2] - 0.5).abs() < 1e-14);
        assert!((p.y[1] + p.y[3] + 0.2).abs() < 1e-14);
        assert!(p.value_hessian.unwrap().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn budget_hessian_matches_multiplier_differences() {
        let u = UtilitySpec::exp_pairwise(vec![1.0, 2.0, 0.5]).unwrap();
        let groups = vec![vec![0, 1], vec![2]];
        let x = [0.2, -0.3, 0.5];
        let cfg = SolverConfig::default();
        let base = solve_point_with(&u, &x, &groups, &[0.1, 0.4], &cfg, None, true, 0).unwrap();
        let h = 1e-5;
        let up = solve_point(&u, &x, &groups, &[0.1 + h, 0.4], &cfg, None).unwrap();
        let dn = solve_point(&u, &x, &groups, &[0.1 - h, 0.4], &cfg, None).unwrap();
        let fd = (up.multipliers[0] - dn.multipliers[0]) / (2.0 * h);
        let hess = base.value_hessian.unwrap();
        assert!((fd - hess[(0, 0)]).abs() < 1e-6 * hess[(0, 0)].abs().max(1.0));
    }

    #[test]
    fn kink_family_is_flagged_and_near_grid_optimum() {
        let u = UtilitySpec::sum_exp_plus_kink(vec![1.0, 2.0], vec![1.0, 0.5], vec![0.0, 0.2], 1.0)
            .unwrap();
        let x = [-0.5, 0.6];
        let s = solve_scenario(&x, 0.4, &u, &SolverConfig::default()).unwrap();
        assert!(s.approximate);
        let f = |t: f64| u.evaluate(&[x[0] + t, x[1] + 0.4 - t]);
        let mut best = f64::NEG_INFINITY;
        for i in 0..=200_000 {
            best = best.max(f(-3.0 + 6.0 * i as f64 / 200_000.0));
        }
        assert!(s.value >= best - 1e-9);
    }

    #[test]
    fn jittered_start_converges_to_same_point() {
        let u = UtilitySpec::exp_pairwise(vec![0.7, 1.3, 2.9]).unwrap();
        let x = [0.5, -1.0, 0.2];
        let plain = solve_scenario(&x, 1.0, &u, &SolverConfig::default()).unwrap();
        let cfg = SolverConfig {
            init_jitter: 0.5,
            init_seed: 9,
            ..SolverConfig::default()
        };
        let groups = vec![vec![0, 1, 2]];
        let jit = solve_point_with(&u, &x, &groups, &[1.0], &cfg, None, false, 3).unwrap();
        for (a, b) in plain.y.iter().zip(&jit.y) {
            assert!((a - b).abs() < 1e-10);
        }
    }
}
