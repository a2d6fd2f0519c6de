//! Exact refinement of derivative-free optima for the kinked family.
//!
//! A simplex search only locates a maximizer to about the square root of its
//! value tolerance. All non-smoothness of `U` sits on the hyperplanes
//! `x_j = k_j`, so once the search has shown which coordinates rest on their
//! kinks, pinning those and running Newton on the others recovers the optimum
//! to working precision. A candidate is accepted only when the one-sided
//! derivatives of every pinned coordinate bracket its multiplier; otherwise
//! the offending coordinate is released and the solve repeats.

use crate::optim::{maximize_constrained, NewtonOptions};
use crate::utility::UtilitySpec;

/// Coordinates this close to their kink after the simplex search are pinned.
const PIN_RADIUS: f64 = 1e-4;

pub(crate) struct Polished {
    pub x: Vec<f64>,
    /// One per group.
    pub multipliers: Vec<f64>,
}

/// Refines a near-optimal `x0` for `max U(x) - <w, x>` subject to
/// `sum_{j in G} x_j = sum_{j in G} x0_j` for every group. Coordinates with
/// `active[j] = false` stay where they are (saturated ones sit at `+inf`).
pub(crate) fn polish(
    u: &UtilitySpec,
    x0: &[f64],
    w: &[f64],
    groups: &[Vec<usize>],
    active: &[bool],
) -> Option<Polished> {
    let n = x0.len();
    let kinks = u.kink_points();
    let mut pinned: Vec<bool> = (0..n)
        .map(|j| active[j] && kinks[j].is_some_and(|k| (x0[j] - k).abs() <= PIN_RADIUS))
        .collect();
    let mut group_of = vec![None; n];
    for (g, members) in groups.iter().enumerate() {
        for &j in members {
            group_of[j] = Some(g);
        }
    }

    'attempt: for _ in 0..=n + 1 {
        let mut x = x0.to_vec();
        for j in (0..n).filter(|&j| pinned[j]) {
            x[j] = kinks[j].unwrap();
        }
        // Restore each group's sum through its free members.
        for g in groups {
            let target: f64 = g.iter().map(|&j| x0[j]).sum();
            let free: Vec<usize> = g
                .iter()
                .copied()
                .filter(|&j| active[j] && !pinned[j])
                .collect();
            let drift = target - g.iter().map(|&j| x[j]).sum::<f64>();
            if free.is_empty() {
                if drift.abs() > 1e-12 * (1.0 + target.abs()) {
                    // Cannot meet the budget with everyone pinned: release the farthest.
                    let j =
                        g.iter().copied().filter(|&j| pinned[j]).max_by(|&a, &b| {
                            (x0[a] - x[a]).abs().total_cmp(&(x0[b] - x[b]).abs())
                        })?;
                    pinned[j] = false;
                    continue 'attempt;
                }
                continue;
            }
            for &j in &free {
                x[j] += drift / free.len() as f64;
            }
        }

        let free: Vec<usize> = (0..n).filter(|&j| active[j] && !pinned[j]).collect();
        let fixed: Vec<bool> = (0..n).map(|j| !active[j] || pinned[j]).collect();
        let index: Vec<Option<usize>> = {
            let mut idx = vec![None; n];
            for (k, &j) in free.iter().enumerate() {
                idx[j] = Some(k);
            }
            idx
        };
        let sub_groups: Vec<Vec<usize>> = groups
            .iter()
            .map(|g| g.iter().filter_map(|&j| index[j]).collect::<Vec<_>>())
            .filter(|g| !g.is_empty())
            .collect();
        let embed = |z: &[f64]| {
            let mut full = x.clone();
            for (k, &j) in free.iter().enumerate() {
                full[j] = z[k];
            }
            full
        };
        let value = |z: &[f64]| {
            let full = embed(z);
            u.evaluate(&full) - free.iter().zip(z).map(|(&j, zj)| w[j] * zj).sum::<f64>()
        };
        let grad_hess = |z: &[f64]| {
            let full = embed(z);
            let (g, h) = u.grad_hess_partial(&full, &fixed)?;
            let grad = free.iter().map(|&j| g[j] - w[j]).collect();
            let hess =
                nalgebra::DMatrix::from_fn(free.len(), free.len(), |a, b| h[(free[a], free[b])]);
            Ok((grad, hess))
        };
        let z0: Vec<f64> = free.iter().map(|&j| x[j]).collect();
        let opts = NewtonOptions {
            tol: 1e-13,
            max_iter: 100,
            grad_scale: Some(w.iter().fold(1.0f64, |m, v| m.max(v.abs()))),
            scale_floor: 1.0,
        };
        let (z, sub_multipliers) = if free.is_empty() {
            (Vec::new(), Vec::new())
        } else {
            let r = maximize_constrained(value, grad_hess, &z0, &sub_groups, &opts).ok()?;
            (r.x, r.multipliers)
        };
        let x = embed(&z);

        // A free coordinate that reached or crossed its kink belongs to the pinned set.
        for &j in &free {
            if let Some(k) = kinks[j] {
                if (x[j] - k).abs() <= 1e-13 * (1.0 + k.abs()) || (x[j] - k) * (x0[j] - k) < 0.0 {
                    pinned[j] = true;
                    continue 'attempt;
                }
            }
        }

        // Map sub-group multipliers back to the caller's groups.
        let mut multipliers = vec![0.0; groups.len()];
        let mut next = 0;
        for (g, members) in groups.iter().enumerate() {
            if members.iter().any(|&j| index[j].is_some()) {
                multipliers[g] = sub_multipliers[next];
                next += 1;
            } else {
                multipliers[g] = f64::NAN;
            }
        }

        for j in (0..n).filter(|&j| pinned[j]) {
            let (left, right) = u.one_sided_partials(&x, j);
            let mu = group_of[j].map_or(0.0, |g| multipliers[g]);
            if mu.is_nan() {
                // Group fully pinned: any multiplier inside every bracket works.
                continue;
            }
            let target = w[j] + mu;
            let slack = 1e-10 * (1.0 + target.abs());
            if target < right - slack || target > left + slack {
                pinned[j] = false;
                continue 'attempt;
            }
        }
        // Fully pinned groups take the midpoint of their common bracket.
        for (g, members) in groups.iter().enumerate() {
            if multipliers[g].is_nan() {
                let (lo, hi) =
                    members
                        .iter()
                        .fold((f64::NEG_INFINITY, f64::INFINITY), |(lo, hi), &j| {
                            let (left, right) = u.one_sided_partials(&x, j);
                            (lo.max(right - w[j]), hi.min(left - w[j]))
                        });
                if lo > hi + 1e-10 {
                    return None;
                }
                multipliers[g] = 0.5 * (lo + hi);
            }
        }
        return Some(Polished { x, multipliers });
    }
    None
}

#[cfg(test)]
mod tests {
    use crate::solver::{solve_scenario, SolverConfig};
    use crate::utility::UtilitySpec;

    /// `argmax_x 1 - e^{-a x} - g (k - x)^+ - mu x`, piece by piece.
    fn separable_argmax(a: f64, g: f64, k: f64, mu: f64) -> f64 {
        let right = a * (-a * k).exp();
        if mu < right {
            -(mu / a).ln() / a
        } else if mu > right + g {
            -((mu - g) / a).ln() / a
        } else {
            k
        }
    }

    #[test]
    fn polished_scenario_matches_separable_solution() {
        let alpha = [1.0, 1.5, 0.7];
        let gamma = [0.5, 0.3, 0.8];
        let kink = [0.0, -0.2, 0.4];
        let u = UtilitySpec::sum_exp_plus_kink(alpha.to_vec(), gamma.to_vec(), kink.to_vec(), 1.0)
            .unwrap();
        for (x, budget) in [
            ([0.3, -0.5, 0.1], 0.1),
            ([-0.2, 0.2, 0.1], 0.4),
            ([1.0, -1.0, 0.0], -0.3),
        ] {
            let total = budget + x.iter().sum::<f64>();
            let positions = |mu: f64| -> Vec<f64> {
                (0..3)
                    .map(|j| separable_argmax(alpha[j], gamma[j], kink[j], mu))
                    .collect()
            };
            // sum of positions decreases in mu
            let (mut lo, mut hi) = (1e-9, 50.0);
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if positions(mid).iter().sum::<f64>() > total {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            let exact = positions(0.5 * (lo + hi));
            let s = solve_scenario(&x, budget, &u, &SolverConfig::default()).unwrap();
            for j in 0..3 {
                assert!(
                    (x[j] + s.y[j] - exact[j]).abs() < 1e-9,
                    "{j}: {} vs {}",
                    x[j] + s.y[j],
                    exact[j]
                );
            }
        }
    }
}
