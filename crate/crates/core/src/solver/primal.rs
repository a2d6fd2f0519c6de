use std::cell::RefCell;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::optim::{maximize_constrained, nelder_mead, NelderMeadOptions, NewtonOptions};
use crate::scenario::{Allocation, ClusterPartition, ScenarioSpace};
use crate::utility::UtilitySpec;

use super::point::{solve_point_with, PointSolution};
use super::{map_indexed, weighted_sum, PrimalSolution, SolverConfig};

pub(crate) fn check_instance(
    space: &ScenarioSpace,
    x: &Allocation,
    u: &UtilitySpec,
    partition: &ClusterPartition,
) -> Result<()> {
    if x.n_scenarios() != space.len() {
        return Err(Error::Dimension(format!(
            "endowment has {} scenarios, space has {}",
            x.n_scenarios(),
            space.len()
        )));
    }
    if x.n_agents() != u.n() || partition.n_agents() != u.n() {
        return Err(Error::Dimension(format!(
            "endowment has {} agents, utility {}, partition {}",
            x.n_agents(),
            u.n(),
            partition.n_agents()
        )));
    }
    Ok(())
}

struct Stage<'a> {
    space: &'a ScenarioSpace,
    x: &'a Allocation,
    u: &'a UtilitySpec,
    groups: &'a [Vec<usize>],
    cfg: &'a SolverConfig,
}

impl Stage<'_> {
    fn solve_all(&self, budgets: &[f64], want_hessian: bool) -> Result<Vec<PointSolution>> {
        map_indexed(self.space.len(), self.cfg.parallel, |w| {
            let column = self.x.column(w);
            solve_point_with(
                self.u,
                &column,
                self.groups,
                budgets,
                self.cfg,
                None,
                want_hessian,
                w as u64,
            )
            .map_err(|e| e.in_scenario(w))
        })
    }

    fn value(&self, sols: &[PointSolution]) -> f64 {
        weighted_sum(self.space.probs(), |w| sols[w].value)
    }
}

/// Maximizes `E_P[U(X + Y)]` over allocations whose cluster sums are
/// deterministic and add up to `budget`.
pub fn solve_primal(
    space: &ScenarioSpace,
    x: &Allocation,
    u: &UtilitySpec,
    budget: f64,
    partition: &ClusterPartition,
    cfg: &SolverConfig,
) -> Result<PrimalSolution> {
    check_instance(space, x, u, partition)?;
    cfg.validate()?;
    let stage = Stage {
        space,
        x,
        u,
        groups: partition.groups(),
        cfg,
    };
    let budgets = if partition.is_single() {
        vec![budget]
    } else {
        optimal_group_budgets(&stage, budget)?
    };
    let sols = stage.solve_all(&budgets, false)?;
    Ok(assemble(&stage, budgets, sols))
}

fn assemble(
    stage: &Stage<'_>,
    group_budgets: Vec<f64>,
    sols: Vec<PointSolution>,
) -> PrimalSolution {
    let m = stage.space.len();
    let n = stage.u.n();
    let k = stage.groups.len();
    let mut y_hat = Allocation::zeros(n, m);
    let mut multipliers = Allocation::zeros(k, m);
    for (w, s) in sols.iter().enumerate() {
        for j in 0..n {
            y_hat.set(j, w, s.y[j]);
        }
        for g in 0..k {
            multipliers.set(g, w, s.multipliers[g]);
        }
    }
    PrimalSolution {
        value: stage.value(&sols),
        approximate: sols.iter().any(|s| s.approximate),
        y_hat,
        multipliers,
        group_budgets,
    }
}

/// Outer concave search over `b` with `sum_G b_G = budget`. The gradient is
/// the expected cluster multiplier and the Hessian the expected budget curvature.
fn optimal_group_budgets(stage: &Stage<'_>, budget: f64) -> Result<Vec<f64>> {
    let n = stage.u.n() as f64;
    let k = stage.groups.len();
    let mut rng = stage.cfg.jitter_rng(u64::MAX);
    let mut b0: Vec<f64> = stage
        .groups
        .iter()
        .map(|g| budget * g.len() as f64 / n)
        .collect();
    let noise: Vec<f64> = (0..k).map(|_| stage.cfg.jitter(&mut rng)).collect();
    let mean = noise.iter().sum::<f64>() / k as f64;
    for (b, e) in b0.iter_mut().zip(&noise) {
        *b += e - mean;
    }

    if !stage.u.is_differentiable() {
        let objective = |r: &[f64]| {
            let mut b = b0.clone();
            for (g, rg) in r.iter().enumerate() {
                b[g + 1] += rg;
                b[0] -= rg;
            }
            stage
                .solve_all(&b, false)
                .map_or(f64::INFINITY, |s| -stage.value(&s))
        };
        let opts = NelderMeadOptions {
            initial_step: 0.5,
            tol: stage.cfg.outer_tol,
            max_evals: 2_000 * k,
            restarts: 2,
        };
        let r = nelder_mead(objective, &vec![0.0; k - 1], &opts);
        let mut b = b0.clone();
        for (g, rg) in r.x.iter().enumerate() {
            b[g + 1] += rg;
            b[0] -= rg;
        }
        return Ok(b);
    }

    let cache: RefCell<Option<(Vec<f64>, Vec<PointSolution>)>> = RefCell::new(None);
    let solved = |b: &[f64], want_hessian: bool| -> Result<Vec<PointSolution>> {
        if let Some((cb, cs)) = cache.borrow().as_ref() {
            if cb == b && (!want_hessian || cs.iter().all(|s| s.value_hessian.is_some())) {
                return Ok(cs.clone());
            }
        }
        let sols = stage.solve_all(b, want_hessian)?;
        *cache.borrow_mut() = Some((b.to_vec(), sols.clone()));
        Ok(sols)
    };
    let value = |b: &[f64]| solved(b, false).map_or(f64::NEG_INFINITY, |s| stage.value(&s));
    let grad_hess = |b: &[f64]| -> Result<(Vec<f64>, DMatrix<f64>)> {
        let sols = solved(b, true)?;
        let probs = stage.space.probs();
        let grad = (0..k)
            .map(|g| weighted_sum(probs, |w| sols[w].multipliers[g]))
            .collect();
        let mut hess = DMatrix::zeros(k, k);
        for (p, s) in probs.iter().zip(&sols) {
            hess += s.value_hessian.as_ref().expect("requested above") * *p;
        }
        Ok((grad, hess))
    };
    let opts = NewtonOptions {
        tol: stage.cfg.outer_tol,
        max_iter: stage.cfg.max_iter,
        grad_scale: None,
        scale_floor: 1.0,
    };
    let all = vec![(0..k).collect::<Vec<_>>()];
    let r = maximize_constrained(value, grad_hess, &b0, &all, &opts)?;
    Ok(r.x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_agent_keeps_whole_budget() {
        let space = ScenarioSpace::new(vec!["a".into(), "b".into()], vec![0.3, 0.7]).unwrap();
        let x = Allocation::from_rows(&[vec![1.0, -0.5]]).unwrap();
        let u = UtilitySpec::exp_pairwise(vec![2.0]).unwrap();
        let p = solve_primal(
            &space,
            &x,
            &u,
            0.4,
            &ClusterPartition::single(1),
            &SolverConfig::default(),
        )
        .unwrap();
        assert_eq!(p.y_hat.row(0), &[0.4, 0.4]);
        let expected = 0.3 * u.evaluate(&[1.4]) + 0.7 * u.evaluate(&[-0.1]);
        assert!((p.value - expected).abs() < 1e-15);
    }

    #[test]
    fn cluster_budgets_equalize_expected_multipliers() {
        let space = ScenarioSpace::uniform(4).unwrap();
        let x = Allocation::from_rows(&[
            vec![0.5, -0.2, 1.0, 0.0],
            vec![-1.0, 0.3, 0.2, 0.8],
            vec![0.0, 0.1, -0.5, 0.4],
        ])
        .unwrap();
        let u = UtilitySpec::exp_pairwise(vec![1.0, 0.6, 2.0]).unwrap();
        let part = ClusterPartition::new(vec![vec![0, 2], vec![1]], 3).unwrap();
        let p = solve_primal(&space, &x, &u, 0.7, &part, &SolverConfig::default()).unwrap();
        let e0 = space.expect(p.multipliers.row(0));
        let e1 = space.expect(p.multipliers.row(1));
        assert!((e0 - e1).abs() < 1e-10 * e0);
        assert!((p.group_budgets.iter().sum::<f64>() - 0.7).abs() < 1e-14);
        // The cluster problem is a restriction of the single-cluster one.
        let single = solve_primal(
            &space,
            &x,
            &u,
            0.7,
            &ClusterPartition::single(3),
            &SolverConfig::default(),
        )
        .unwrap();
        assert!(p.value <= single.value + 1e-12);
    }

    #[test]
    fn parallel_and_sequential_agree_bitwise() {
        let space = ScenarioSpace::uniform(64).unwrap();
        let rows: Vec<Vec<f64>> = (0..3)
            .map(|j| {
                (0..64)
                    .map(|w| ((j * 7 + w * 3) % 11) as f64 / 5.0 - 1.0)
                    .collect()
            })
            .collect();
        let x = Allocation::from_rows(&rows).unwrap();
        let u = UtilitySpec::exp_pairwise(vec![1.0, 0.6, 2.0]).unwrap();
        let seq = solve_primal(
            &space,
            &x,
            &u,
            0.2,
            &ClusterPartition::single(3),
            &SolverConfig::default(),
        )
        .unwrap();
        let cfg = SolverConfig {
            parallel: true,
            ..SolverConfig::default()
        };
        let par = solve_primal(&space, &x, &u, 0.2, &ClusterPartition::single(3), &cfg).unwrap();
        assert_eq!(seq.y_hat, par.y_hat);
        assert_eq!(seq.value.to_bits(), par.value.to_bits());
    }
}
