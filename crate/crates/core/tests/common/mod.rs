#![allow(dead_code)]

use msorte::scenario::{Allocation, ScenarioSpace};
use msorte::utility::UtilitySpec;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub struct Instance {
    pub space: ScenarioSpace,
    pub x: Allocation,
    pub u: UtilitySpec,
    pub budget: f64,
}

/// Random positive probabilities summing to one.
pub fn random_space(rng: &mut ChaCha8Rng, m: usize) -> ScenarioSpace {
    let raw: Vec<f64> = (0..m).map(|_| rng.gen_range(0.2..1.0)).collect();
    let total: f64 = raw.iter().sum();
    let mut probs: Vec<f64> = raw.iter().map(|p| p / total).collect();
    // absorb rounding in the last entry
    let head: f64 = probs[..m - 1].iter().sum();
    probs[m - 1] = 1.0 - head;
    ScenarioSpace::new((0..m).map(|w| format!("s{w}")).collect(), probs).unwrap()
}

pub fn random_allocation(rng: &mut ChaCha8Rng, n: usize, m: usize, half_width: f64) -> Allocation {
    Allocation::new(
        n,
        m,
        (0..n * m)
            .map(|_| rng.gen_range(-half_width..half_width))
            .collect(),
    )
    .unwrap()
}

pub fn random_alpha(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(0.5..3.0)).collect()
}

/// The randomized exponential instances of the acceptance suite.
pub fn exp_instance(rng: &mut ChaCha8Rng, n: usize, m: usize) -> Instance {
    let space = random_space(rng, m);
    let x = random_allocation(rng, n, m, 2.0);
    let u = UtilitySpec::exp_pairwise(random_alpha(rng, n)).unwrap();
    let budget = [-1.0, 0.0, 1.0][rng.gen_range(0..3)];
    Instance {
        space,
        x,
        u,
        budget,
    }
}

/// Endowments whose aggregate repeats across scenarios with distinct columns.
pub fn tied_instance(rng: &mut ChaCha8Rng, n: usize, levels: usize, copies: usize) -> Instance {
    let m = levels * copies;
    let space = random_space(rng, m);
    let mut x = Allocation::zeros(n, m);
    for l in 0..levels {
        let total: f64 = rng.gen_range(-3.0..3.0);
        for c in 0..copies {
            let w = l * copies + c;
            let mut rest = total;
            for j in 0..n - 1 {
                let v = rng.gen_range(-2.0..2.0);
                x.set(j, w, v);
                rest -= v;
            }
            x.set(n - 1, w, rest);
        }
    }
    let u = UtilitySpec::exp_pairwise(random_alpha(rng, n)).unwrap();
    Instance {
        space,
        x,
        u,
        budget: rng.gen_range(-1.0..1.0),
    }
}

pub fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

/// Generic full-dimensional reference for `max E_P[U(X + Y)]` over all
/// `N x M` matrices whose cluster sums are deterministic and total `budget`.
/// Projected gradient ascent with Armijo backtracking; it knows nothing
/// about the per-scenario decomposition.
pub fn joint_maximize(
    space: &ScenarioSpace,
    x: &Allocation,
    u: &UtilitySpec,
    budget: f64,
    groups: &[Vec<usize>],
) -> Allocation {
    let (n, m) = (x.n_agents(), x.n_scenarios());
    let objective =
        |y: &Allocation| space.expect_with(|w| u.evaluate(&x.add(y).unwrap().column(w)));
    let gradient = |y: &Allocation| {
        let pos = x.add(y).unwrap();
        let mut g = Allocation::zeros(n, m);
        for w in 0..m {
            let gw = u.gradient(&pos.column(w)).unwrap();
            for (j, gj) in gw.iter().enumerate() {
                g.set(j, w, space.probs()[w] * gj);
            }
        }
        g
    };
    let project = |y: &Allocation| project_feasible(y, budget, groups);

    let mut y = project(&Allocation::zeros(n, m));
    let mut f = objective(&y);
    let mut step: f64 = 1.0;
    for _ in 0..200_000 {
        let g = gradient(&y);
        // Projected gradient: the tangent-space component of g.
        let d = project_direction(&g, groups);
        let norm2: f64 = d.as_slice().iter().map(|v| v * v).sum();
        if norm2.sqrt() < 1e-14 {
            break;
        }
        step = (step * 2.0).min(1e3);
        loop {
            let trial = project(&y.zip_map(&d, |a, b| a + step * b).unwrap());
            let ft = objective(&trial);
            if ft >= f + 1e-4 * step * norm2 {
                y = trial;
                f = ft;
                break;
            }
            step *= 0.5;
            if step < 1e-18 {
                return y;
            }
        }
    }
    y
}

/// Euclidean projection onto `{Y : sum_{j in G} Y_j(w) = c_G for all w, sum_G c_G = budget}`.
pub fn project_feasible(y: &Allocation, budget: f64, groups: &[Vec<usize>]) -> Allocation {
    let (n, m) = (y.n_agents(), y.n_scenarios());
    let sums: Vec<Vec<f64>> = groups
        .iter()
        .map(|g| {
            (0..m)
                .map(|w| g.iter().map(|&j| y.get(j, w)).sum())
                .collect()
        })
        .collect();
    let means: Vec<f64> = sums
        .iter()
        .map(|s| s.iter().sum::<f64>() / m as f64)
        .collect();
    let excess = means.iter().sum::<f64>() - budget;
    let mut out = y.clone();
    for (gi, g) in groups.iter().enumerate() {
        let c = means[gi] - excess * g.len() as f64 / n as f64;
        for (w, s) in sums[gi].iter().enumerate() {
            let shift = (s - c) / g.len() as f64;
            for &j in g {
                out.set(j, w, y.get(j, w) - shift);
            }
        }
    }
    out
}

/// Projection of a direction onto the tangent space of the feasible set.
fn project_direction(d: &Allocation, groups: &[Vec<usize>]) -> Allocation {
    project_feasible(d, 0.0, groups)
}
