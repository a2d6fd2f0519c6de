use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::optim::{maximize_constrained, nelder_mead, NelderMeadOptions, NewtonOptions};
use crate::scenario::{Allocation, ClusterPartition, ScenarioSpace};
use crate::utility::UtilitySpec;

use super::primal::check_instance;
use super::{weighted_sum, SolverConfig};

#[derive(Debug, Clone)]
pub struct DetSolution {
    pub a: Vec<f64>,
    pub value: f64,
    pub approximate: bool,
}

/// Maximizes `E_P[U(X + a)]` over deterministic `a` with `sum_j a_j = budget`.
pub fn solve_det(
    space: &ScenarioSpace,
    x: &Allocation,
    u: &UtilitySpec,
    budget: f64,
    cfg: &SolverConfig,
) -> Result<DetSolution> {
    let n = u.n();
    check_instance(space, x, u, &ClusterPartition::single(n))?;
    cfg.validate()?;
    let probs = space.probs();
    let columns: Vec<Vec<f64>> = (0..space.len()).map(|w| x.column(w)).collect();
    let shifted = |w: usize, a: &[f64]| -> Vec<f64> {
        columns[w].iter().zip(a).map(|(x, a)| x + a).collect()
    };
    let value = |a: &[f64]| {
        let mut overflow = false;
        let v = weighted_sum(probs, |w| {
            let (v, flag) = u.evaluate_flagged(&shifted(w, a));
            overflow |= flag;
            v
        });
        if overflow {
            f64::NEG_INFINITY
        } else {
            v
        }
    };
    let a0 = vec![budget / n as f64; n];

    if !u.is_differentiable() {
        let assemble = |r: &[f64]| -> Vec<f64> {
            let mut a = a0.clone();
            for (i, ri) in r.iter().enumerate() {
                a[i + 1] += ri;
                a[0] -= ri;
            }
            a
        };
        let opts = NelderMeadOptions {
            initial_step: 0.5,
            tol: 1e-12,
            max_evals: 50_000 * n,
            restarts: 4,
        };
        let r = nelder_mead(|r| -value(&assemble(r)), &vec![0.0; n - 1], &opts);
        if !r.value.is_finite() {
            return Err(Error::non_convergence(
                "deterministic simplex search",
                r.evaluations,
                r.value,
                &r.x,
            ));
        }
        return Ok(DetSolution {
            a: assemble(&r.x),
            value: -r.value,
            approximate: true,
        });
    }

    let grad_hess = |a: &[f64]| -> Result<(Vec<f64>, DMatrix<f64>)> {
        let mut g = vec![0.0; n];
        let mut h = DMatrix::zeros(n, n);
        for (w, p) in probs.iter().enumerate() {
            let (gw, hw) = u.grad_hess(&shifted(w, a)).map_err(|e| e.in_scenario(w))?;
            for j in 0..n {
                g[j] += p * gw[j];
            }
            h += hw * *p;
        }
        Ok((g, h))
    };
    let opts = NewtonOptions {
        tol: cfg.newton_tol,
        max_iter: cfg.max_iter,
        grad_scale: None,
        scale_floor: 1.0,
    };
    let r = maximize_constrained(value, grad_hess, &a0, &[(0..n).collect()], &opts)?;
    Ok(DetSolution {
        a: r.x,
        value: r.value,
        approximate: false,
    })
}
