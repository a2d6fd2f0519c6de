//! Dual restricted to a given pricing vector:
//! `min_{lambda >= 0} lambda (sum_j E_{Q^j}[X^j] + A) + E_P[V(lambda dQ/dP)]`.

use std::cell::RefCell;

use crate::conjugate::{inner_max, InnerMax};
use crate::error::{Error, Result};
use crate::optim::scalar::{bracket_increasing, golden_section, safeguarded_newton};
use crate::scenario::{expectation, Allocation, PricingVector, ScenarioSpace};
use crate::utility::UtilitySpec;

use super::{map_indexed, weighted_sum, SolverConfig};

#[derive(Debug, Clone, Copy)]
pub struct FixedQSolution {
    pub lambda: f64,
    pub value: f64,
    pub approximate: bool,
}

struct Problem<'a> {
    u: &'a UtilitySpec,
    probs: &'a [f64],
    columns: Vec<Vec<f64>>,
    /// `sum_j E_{Q^j}[X^j] + A`
    price: f64,
    cfg: &'a SolverConfig,
}

impl<'a> Problem<'a> {
    fn new(
        space: &'a ScenarioSpace,
        x: &Allocation,
        u: &'a UtilitySpec,
        budget: f64,
        q: &PricingVector,
        cfg: &'a SolverConfig,
    ) -> Result<Self> {
        if q.n_agents() != u.n() {
            return Err(Error::Dimension(format!(
                "Q has {} rows, utility has {} agents",
                q.n_agents(),
                u.n()
            )));
        }
        let price = expectation(space, x, q)?.iter().sum::<f64>() + budget;
        Ok(Problem {
            u,
            probs: space.probs(),
            columns: (0..space.len()).map(|w| q.column(w)).collect(),
            price,
            cfg,
        })
    }

    fn inner(&self, lambda: f64, warm: &[Option<Vec<f64>>]) -> Result<Vec<InnerMax>> {
        map_indexed(self.columns.len(), self.cfg.parallel, |w| {
            let weights: Vec<f64> = self.columns[w].iter().map(|q| lambda * q).collect();
            inner_max(self.u, &weights, warm[w].as_deref()).map_err(|e| e.in_scenario(w))
        })
    }

    fn value(&self, lambda: f64, inner: &[InnerMax]) -> f64 {
        lambda * self.price + weighted_sum(self.probs, |w| inner[w].value)
    }

    /// `(f'(lambda), f''(lambda))`
    fn derivatives(&self, inner: &[InnerMax]) -> (f64, f64) {
        let mut d1 = self.price;
        let mut d2 = 0.0;
        for (w, r) in inner.iter().enumerate() {
            let q = &self.columns[w];
            let pushed: f64 = q
                .iter()
                .zip(&r.x)
                .filter(|(qj, _)| **qj > 0.0)
                .map(|(qj, xj)| qj * xj)
                .sum();
            d1 -= self.probs[w] * pushed;
            if let Some(c) = &r.curvature {
                let quad: f64 = (0..q.len())
                    .map(|i| (0..q.len()).map(|j| q[i] * c[(i, j)] * q[j]).sum::<f64>())
                    .sum();
                d2 += self.probs[w] * quad;
            } else {
                d2 = f64::NAN;
            }
        }
        (d1, d2)
    }
}

/// Objective value at a given `lambda`.
pub fn fixed_q_objective(
    space: &ScenarioSpace,
    x: &Allocation,
    u: &UtilitySpec,
    budget: f64,
    q: &PricingVector,
    lambda: f64,
    cfg: &SolverConfig,
) -> Result<f64> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::Invalid(format!(
            "lambda must be finite and nonnegative, got {lambda}"
        )));
    }
    let prob = Problem::new(space, x, u, budget, q, cfg)?;
    let inner = prob.inner(lambda, &vec![None; space.len()])?;
    Ok(prob.value(lambda, &inner))
}

pub fn solve_fixed_q_dual(
    space: &ScenarioSpace,
    x: &Allocation,
    u: &UtilitySpec,
    budget: f64,
    q: &PricingVector,
    cfg: &SolverConfig,
) -> Result<FixedQSolution> {
    let prob = Problem::new(space, x, u, budget, q, cfg)?;
    let m = space.len();
    let warm: RefCell<Vec<Option<Vec<f64>>>> = RefCell::new(vec![None; m]);
    let eval = |t: f64| -> Result<Vec<InnerMax>> {
        let inner = prob.inner(t.exp(), &warm.borrow())?;
        *warm.borrow_mut() = inner.iter().map(|r| Some(r.x.clone())).collect();
        Ok(inner)
    };

    // Probe for a finite objective before searching.
    let finite_at = [0.0, -10.0, 10.0, -30.0, 30.0]
        .into_iter()
        .find(|&t| eval(t).is_ok_and(|inner| prob.value(t.exp(), &inner).is_finite()));
    let Some(t_probe) = finite_at else {
        return Err(Error::InfiniteDual);
    };

    // Slope in t = ln(lambda) has the sign of f'(lambda).
    let slope = |t: f64| eval(t).map_or(f64::NAN, |inner| prob.derivatives(&inner).0);
    let (lo, hi) = bracket_increasing(slope, t_probe, 1.0, 200)?;
    let objective = |t: f64| eval(t).map_or(f64::INFINITY, |inner| prob.value(t.exp(), &inner));
    let (t_golden, _) = golden_section(objective, lo, hi, 1e-6, 200);

    let smooth = u.is_differentiable();
    let t = if smooth {
        let mut failure = None;
        let t = safeguarded_newton(
            |t| match eval(t) {
                Ok(inner) => {
                    let (d1, d2) = prob.derivatives(&inner);
                    let lambda = t.exp();
                    // d/dt f'(e^t) = lambda f''(lambda)
                    (d1, lambda * d2)
                }
                Err(e) => {
                    failure = Some(e);
                    (f64::NAN, f64::NAN)
                }
            },
            lo,
            hi,
            t_golden,
            1e-15,
            cfg.max_iter,
        )?;
        if let Some(e) = failure {
            return Err(e);
        }
        t
    } else {
        golden_section(objective, lo, hi, 1e-12, 400).0
    };
    let lambda = t.exp();
    let inner = eval(t)?;
    Ok(FixedQSolution {
        lambda,
        value: prob.value(lambda, &inner),
        approximate: !smooth,
    })
}
