use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::scenario::{expectation, Allocation, ClusterPartition, ScenarioSpace};
use crate::solver::{map_indexed, SolverConfig};
use crate::utility::{Family, UtilitySpec};

use super::reopt::reoptimize;
use super::EquilibriumTriple;

#[derive(Debug, Clone, Serialize)]
pub struct NashReport {
    /// Best achievable gain of each agent by a unilateral deviation.
    pub improvements: Vec<f64>,
    pub max_improvement: f64,
}

/// Re-optimizes each agent's exchange over all of `R^M` with the others held
/// fixed, pricing the deviation by the agent's own `Q^j`.
pub fn verify_nash(
    t: &EquilibriumTriple,
    space: &ScenarioSpace,
    x: &Allocation,
    u: &UtilitySpec,
    cfg: &SolverConfig,
) -> Result<NashReport> {
    let n = u.n();
    let m = space.len();
    let positions = t.positions(space, x)?;
    let columns: Vec<Vec<f64>> = (0..m).map(|w| positions.column(w)).collect();
    let smooth = u.is_differentiable();
    let improvements = map_indexed(n, cfg.parallel, |j| {
        let slices: Vec<_> = columns.iter().map(|c| u.slice(c, j)).collect();
        let base: Vec<f64> = (0..m).map(|w| x.get(j, w) + t.a[j]).collect();
        reoptimize(
            space.probs(),
            t.q.row(j),
            &slices,
            &base,
            t.y_tilde.row(j),
            smooth,
        )
        .map(|r| r.best - r.current)
        .map_err(|e| Error::Assembly(format!("Nash re-optimization of agent {j}: {e}")))
    })?;
    let max_improvement = improvements.iter().fold(0.0f64, |m, v| m.max(*v));
    Ok(NashReport {
        improvements,
        max_improvement,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct BuhlmannReport {
    /// Worst clearing violation `|sum_j Y~_j|` together with the spread of each
    /// cluster's sum across scenarios.
    pub clearing_max: f64,
    /// Largest difference between density rows of agents in the same cluster.
    pub pricing_spread_max: f64,
    /// Per-agent optimality gains; only for sums of univariate utilities.
    pub individual_improvements: Option<Vec<f64>>,
}

impl BuhlmannReport {
    pub fn individual_max(&self) -> Option<f64> {
        self.individual_improvements
            .as_ref()
            .map(|v| v.iter().fold(0.0f64, |m, x| m.max(*x)))
    }
}

pub(crate) fn clearing_residual(y_tilde: &Allocation, partition: &ClusterPartition) -> f64 {
    let m = y_tilde.n_scenarios();
    let mut worst = y_tilde
        .aggregate()
        .iter()
        .fold(0.0f64, |acc, v| acc.max(v.abs()));
    if !partition.is_single() {
        for g in partition.groups() {
            let sums: Vec<f64> = (0..m)
                .map(|w| g.iter().map(|&j| y_tilde.get(j, w)).sum())
                .collect();
            let (lo, hi) = sums
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
                    (lo.min(*v), hi.max(*v))
                });
            worst = worst.max(hi - lo);
        }
    }
    worst
}

pub(crate) fn pricing_spread(t: &EquilibriumTriple, partition: &ClusterPartition) -> f64 {
    let mut worst = 0.0f64;
    for g in partition.groups() {
        let lead = t.q.row(g[0]);
        for &j in &g[1..] {
            for (a, b) in lead.iter().zip(t.q.row(j)) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    worst
}

/// Clearing, common pricing within clusters and, for `SUM_EXP`, individual
/// optimality of each agent against its own pricing measure:
/// `Y~^j` maximizes `E[u_j(a_j + X^j + Y)]` over `E_{Q^j}[Y] <= 0`.
pub fn verify_buhlmann(
    t: &EquilibriumTriple,
    space: &ScenarioSpace,
    x: &Allocation,
    u: &UtilitySpec,
    partition: &ClusterPartition,
    cfg: &SolverConfig,
) -> Result<BuhlmannReport> {
    let individual_improvements = if u.family() == Family::SumExp {
        let m = space.len();
        let v = map_indexed(u.n(), cfg.parallel, |j| {
            let slice = u.component_slice(j).expect("sum of univariate utilities");
            let slices = vec![slice; m];
            let base: Vec<f64> = (0..m).map(|w| x.get(j, w) + t.a[j]).collect();
            reoptimize(
                space.probs(),
                t.q.row(j),
                &slices,
                &base,
                t.y_tilde.row(j),
                true,
            )
            .map(|r| r.best - r.current)
        })?;
        Some(v)
    } else {
        None
    };
    Ok(BuhlmannReport {
        clearing_max: clearing_residual(&t.y_tilde, partition),
        pricing_spread_max: pricing_spread(t, partition),
        individual_improvements,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct MeasurabilityReport {
    pub checked: bool,
    pub reason: Option<String>,
    pub level_sets: usize,
    pub density_spread: f64,
    pub position_spread: f64,
}

impl MeasurabilityReport {
    pub fn max_spread(&self) -> f64 {
        self.density_spread.max(self.position_spread)
    }
}

/// Level sets of the aggregate endowment, identified after rounding to 12 decimals.
fn level_sets(xbar: &[f64]) -> BTreeMap<i128, Vec<usize>> {
    let mut sets: BTreeMap<i128, Vec<usize>> = BTreeMap::new();
    for (w, v) in xbar.iter().enumerate() {
        sets.entry((v * 1e12).round() as i128).or_default().push(w);
    }
    sets
}

/// Largest within-level-set spread of the density and of the post-trade
/// positions `X + a + Y~`.
pub fn verify_measurability(
    t: &EquilibriumTriple,
    x: &Allocation,
    u: &UtilitySpec,
    partition: &ClusterPartition,
) -> Result<MeasurabilityReport> {
    let skip = |reason: &str| MeasurabilityReport {
        checked: false,
        reason: Some(reason.to_string()),
        level_sets: 0,
        density_spread: 0.0,
        position_spread: 0.0,
    };
    if !partition.is_single() {
        return Ok(skip("requires a single cluster"));
    }
    if !u.is_differentiable() {
        return Ok(skip("requires a differentiable utility"));
    }
    let sets = level_sets(&x.aggregate());
    let positions = x.add(&t.y_tilde)?.shift_rows(&t.a);
    let spread = |row: &[f64], members: &[usize]| {
        let (lo, hi) = members
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &w| {
                (lo.min(row[w]), hi.max(row[w]))
            });
        hi - lo
    };
    let mut density_spread = 0.0f64;
    let mut position_spread = 0.0f64;
    for members in sets.values() {
        for j in 0..u.n() {
            density_spread = density_spread.max(spread(t.q.row(j), members));
            position_spread = position_spread.max(spread(positions.row(j), members));
        }
    }
    Ok(MeasurabilityReport {
        checked: true,
        reason: None,
        level_sets: sets.len(),
        density_spread,
        position_spread,
    })
}

/// Smallest `sum_j Y^j - sum_j E_{Q^j}[Y^j]` over `samples` random feasible
/// allocations (cluster sums deterministic).
pub fn fairness_min_slack(
    t: &EquilibriumTriple,
    space: &ScenarioSpace,
    partition: &ClusterPartition,
    samples: usize,
    seed: u64,
) -> Result<f64> {
    let n = partition.n_agents();
    let m = space.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = f64::INFINITY;
    for _ in 0..samples {
        let mut y = Allocation::zeros(n, m);
        let mut total = 0.0;
        for g in partition.groups() {
            let level: f64 = rng.gen_range(-2.0..2.0);
            total += level;
            for w in 0..m {
                let noise: Vec<f64> = g.iter().map(|_| rng.gen_range(-1.0..1.0)).collect();
                let mean = noise.iter().sum::<f64>() / g.len() as f64;
                for (&j, e) in g.iter().zip(&noise) {
                    y.set(j, w, level / g.len() as f64 + e - mean);
                }
            }
        }
        let priced: f64 = expectation(space, &y, &t.q)?.iter().sum();
        worst = worst.min(total - priced);
    }
    Ok(if samples == 0 { 0.0 } else { worst })
}
