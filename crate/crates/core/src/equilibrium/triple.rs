use crate::error::{Error, Result};
use crate::scenario::{expectation, Allocation, PricingVector, ScenarioSpace};
use crate::solver::{DualSolution, PrimalSolution};

/// Risk exchange, pricing vector and initial capital allocation, normalized
/// so that `E_{Q^j}[Y~^j] = 0` for every agent.
#[derive(Debug, Clone, PartialEq)]
pub struct EquilibriumTriple {
    pub y_tilde: Allocation,
    pub q: PricingVector,
    pub a: Vec<f64>,
    pub budget: f64,
}

impl EquilibriumTriple {
    /// Post-trade positions `X + a + Y~ - E_Q[Y~]`.
    pub fn positions(&self, space: &ScenarioSpace, x: &Allocation) -> Result<Allocation> {
        let ey = expectation(space, &self.y_tilde, &self.q)?;
        let shift: Vec<f64> = self.a.iter().zip(&ey).map(|(a, e)| a - e).collect();
        Ok(x.add(&self.y_tilde)?.shift_rows(&shift))
    }
}

/// `a = E_Q[Y^]`, `Y~ = Y^ - a`, `Q = Q^`.
pub fn assemble(
    p: &PrimalSolution,
    d: &DualSolution,
    space: &ScenarioSpace,
    x: &Allocation,
    budget: f64,
) -> Result<EquilibriumTriple> {
    if p.y_hat.n_agents() != x.n_agents() || p.y_hat.n_scenarios() != space.len() {
        return Err(Error::Dimension(
            "primal solution does not match the instance".into(),
        ));
    }
    let a = expectation(space, &p.y_hat, &d.q_hat)?;
    let neg: Vec<f64> = a.iter().map(|v| -v).collect();
    let y_tilde = p.y_hat.shift_rows(&neg);
    let triple = EquilibriumTriple {
        y_tilde,
        q: d.q_hat.clone(),
        a,
        budget,
    };

    let scale = p
        .y_hat
        .as_slice()
        .iter()
        .fold(1.0f64, |m, v| m.max(v.abs()));
    let budget_err = (triple.a.iter().sum::<f64>() - budget).abs();
    let clearing = triple
        .y_tilde
        .aggregate()
        .iter()
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let zero_mean = expectation(space, &triple.y_tilde, &triple.q)?
        .iter()
        .fold(0.0f64, |m, v| m.max(v.abs()));
    if budget_err > 1e-10 * scale || clearing > 1e-10 * scale || zero_mean > 1e-8 * scale {
        return Err(Error::Assembly(format!(
            "invariants violated: |sum a - A| = {budget_err:e}, clearing {clearing:e}, max |E_Q[Y~]| = {zero_mean:e}"
        )));
    }
    Ok(triple)
}
