//! Primal, dual and deterministic allocation problems on a finite space.
//!
//! With the feasible set "sums deterministic within each cluster" the
//! random-allocation problem decouples across scenarios once the cluster
//! budgets are fixed, so every solver here is an outer search over at most
//! `K - 1` budget coordinates around independent per-scenario problems.

mod det;
mod dual;
mod fixed_q;
mod point;
mod primal;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scenario::{Allocation, PricingVector};

pub use det::{solve_det, DetSolution};
pub use dual::solve_dual;
pub use fixed_q::{fixed_q_objective, solve_fixed_q_dual, FixedQSolution};
pub use point::{solve_point, solve_scenario, PointSolution, ScenarioSolution};
pub use primal::solve_primal;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    /// Relative tolerance on the projected gradient of every Newton solve.
    pub newton_tol: f64,
    pub max_iter: usize,
    /// Tolerance of the outer search over cluster budgets.
    pub outer_tol: f64,
    pub parallel: bool,
    /// Size of a random perturbation applied to every starting point.
    pub init_jitter: f64,
    pub init_seed: u64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            newton_tol: 1e-11,
            max_iter: 200,
            outer_tol: 1e-10,
            parallel: false,
            init_jitter: 0.0,
            init_seed: 0,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.newton_tol > 0.0 && self.outer_tol > 0.0) {
            return Err(Error::Invalid("solver tolerances must be positive".into()));
        }
        if self.max_iter == 0 {
            return Err(Error::Invalid("max_iter must be at least 1".into()));
        }
        if !(self.init_jitter >= 0.0 && self.init_jitter.is_finite()) {
            return Err(Error::Invalid(
                "init_jitter must be finite and nonnegative".into(),
            ));
        }
        Ok(())
    }

    /// Deterministic per-slot perturbation stream; `None` when jitter is off.
    pub(crate) fn jitter_rng(&self, stream: u64) -> Option<ChaCha8Rng> {
        (self.init_jitter > 0.0).then(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(self.init_seed);
            rng.set_stream(stream);
            rng
        })
    }

    pub(crate) fn jitter(&self, rng: &mut Option<ChaCha8Rng>) -> f64 {
        rng.as_mut()
            .map_or(0.0, |r| self.init_jitter * r.gen_range(-1.0..1.0))
    }
}

#[derive(Debug, Clone)]
pub struct PrimalSolution {
    pub y_hat: Allocation,
    pub value: f64,
    /// Lagrange multiplier of each cluster's budget constraint, `K x M`.
    pub multipliers: Allocation,
    pub group_budgets: Vec<f64>,
    /// Derivative-free search was involved.
    pub approximate: bool,
}

impl PrimalSolution {
    /// Multipliers of the single-cluster problem, one per scenario.
    pub fn per_scenario_multipliers(&self) -> &[f64] {
        self.multipliers.row(0)
    }
}

#[derive(Debug, Clone)]
pub struct DualSolution {
    pub lambda: f64,
    pub q_hat: PricingVector,
    pub value: f64,
    /// Optimal `Z = lambda dQ/dP` per cluster, `K x M`.
    pub z: Allocation,
    pub approximate: bool,
}

/// `dual - primal`.
pub fn duality_gap(p: &PrimalSolution, d: &DualSolution) -> f64 {
    d.value - p.value
}

/// Runs `f` over `0..m`, in parallel when asked, keeping index order and
/// reporting the lowest-index failure.
pub(crate) fn map_indexed<T, F>(m: usize, parallel: bool, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync + Send,
{
    let results: Vec<Result<T>> = if parallel {
        (0..m).into_par_iter().map(&f).collect()
    } else {
        (0..m).map(&f).collect()
    };
    results.into_iter().collect()
}

/// `sum_w p_w f(w)` in ascending order.
pub(crate) fn weighted_sum(probs: &[f64], mut f: impl FnMut(usize) -> f64) -> f64 {
    probs
        .iter()
        .enumerate()
        .fold(0.0, |acc, (w, p)| acc + p * f(w))
}
