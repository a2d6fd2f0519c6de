//! Dual problem over `(lambda, Q)` through the substitution `Z = lambda dQ/dP`.
//!
//! For one cluster the objective separates into scalar convex problems
//! `min_z z (Xbar + A) + V(z 1)` per scenario. With several clusters the
//! common-mass constraint `E[Z_G] = lambda` is dualized by cluster budgets
//! `b` with `sum b_G = A`, leaving per-scenario problems in `K` variables and a
//! concave outer maximization over `b`.

use std::cell::RefCell;

use nalgebra::DMatrix;

use crate::conjugate::{inner_max, InnerMax};
use crate::error::{Error, Result};
use crate::optim::scalar::{bracket_increasing, golden_section, safeguarded_newton};
use crate::optim::{maximize_constrained, NewtonOptions};
use crate::scenario::{Allocation, ClusterPartition, PricingVector, ScenarioSpace};
use crate::utility::UtilitySpec;

use super::fixed_q::fixed_q_objective;
use super::primal::check_instance;
use super::{map_indexed, weighted_sum, DualSolution, SolverConfig};

/// Densities below this are treated as a loss of equivalence with `P`.
pub const Z_FLOOR: f64 = 1e-14;

pub fn solve_dual(
    space: &ScenarioSpace,
    x: &Allocation,
    u: &UtilitySpec,
    budget: f64,
    partition: &ClusterPartition,
    cfg: &SolverConfig,
) -> Result<DualSolution> {
    check_instance(space, x, u, partition)?;
    cfg.validate()?;
    let groups = partition.groups();
    let k = groups.len();
    let m = space.len();

    let (z, approximate) = if partition.is_single() {
        let xbar = x.aggregate();
        let zs = map_indexed(m, cfg.parallel, |w| {
            scalar_z(u, xbar[w] + budget, cfg, w as u64).map_err(|e| match e {
                Error::DualFloor(_) => Error::DualFloor(w),
                other => other.in_scenario(w),
            })
        })?;
        let z = Allocation::new(1, m, zs.iter().map(|r| r.0).collect())?;
        (z, zs.iter().any(|r| r.1))
    } else {
        if !u.is_differentiable() {
            return Err(Error::Unsupported(
                "cluster dual for non-differentiable utilities (no unique dual optimum to certify)"
                    .into(),
            ));
        }
        (cluster_z(space, x, u, budget, groups, cfg)?, false)
    };

    for w in 0..m {
        for g in 0..k {
            if z.get(g, w) < Z_FLOOR {
                return Err(Error::DualFloor(w));
            }
        }
    }

    let masses: Vec<f64> = (0..k).map(|g| space.expect(z.row(g))).collect();
    let lambda = masses.iter().sum::<f64>() / k as f64;
    let mut density = Allocation::zeros(u.n(), m);
    for j in 0..u.n() {
        let g = partition.group_of(j);
        for w in 0..m {
            density.set(j, w, z.get(g, w) / masses[g]);
        }
    }
    let q_hat = PricingVector::new(space, density)?;
    let value = fixed_q_objective(space, x, u, budget, &q_hat, lambda, cfg)?;
    Ok(DualSolution {
        lambda,
        q_hat,
        value,
        z,
        approximate,
    })
}

/// Argmin over `z > 0` of `z s + V(z 1)`, solved in `t = ln z` on the
/// stationarity condition `s = sum_j x*_j(z 1)`.
fn scalar_z(u: &UtilitySpec, s: f64, cfg: &SolverConfig, stream: u64) -> Result<(f64, bool)> {
    let n = u.n();
    let level = vec![s / n as f64; n];
    let g0 = match u.gradient(&level) {
        Ok(g) => g.iter().sum::<f64>() / n as f64,
        Err(Error::NonDifferentiable) => {
            let sum: f64 = (0..n).map(|j| u.one_sided_partials(&level, j).1).sum();
            sum / n as f64
        }
        Err(e) => return Err(e),
    };
    let mut rng = cfg.jitter_rng(stream);
    let t0 = g0.ln() + cfg.jitter(&mut rng);

    let warm: RefCell<Option<Vec<f64>>> = RefCell::new(None);
    let solve = |t: f64| -> Result<InnerMax> {
        let w = vec![t.exp(); n];
        let prev = warm.borrow().clone();
        let r = inner_max(u, &w, prev.as_deref())?;
        *warm.borrow_mut() = Some(r.x.clone());
        Ok(r)
    };
    let residual = |t: f64| solve(t).map_or(f64::NAN, |r| s - r.x.iter().sum::<f64>());

    let (lo, hi) = bracket_increasing(residual, t0, 1.0, 200)?;
    if lo.exp() < Z_FLOOR && hi.exp() < Z_FLOOR {
        return Err(Error::DualFloor(0));
    }

    if !u.is_differentiable() {
        let objective = |t: f64| solve(t).map_or(f64::INFINITY, |r| t.exp() * s + r.value);
        let (t, _) = golden_section(objective, lo - 0.5, hi + 0.5, 1e-12, 400);
        return Ok((t.exp(), true));
    }

    let mut failure = None;
    let t = safeguarded_newton(
        |t| match solve(t) {
            Ok(r) => {
                let z = t.exp();
                let curv = r.curvature.as_ref().map_or(f64::NAN, |c| c.sum());
                (s - r.x.iter().sum::<f64>(), z * curv)
            }
            Err(e) => {
                failure = Some(e);
                (f64::NAN, f64::NAN)
            }
        },
        lo,
        hi,
        t0.clamp(lo, hi),
        1e-15,
        cfg.max_iter,
    )?;
    if let Some(e) = failure {
        return Err(e);
    }
    Ok((t.exp(), false))
}

/// Per-scenario `min_{z > 0} sum_G z_G c_G + V(C z)` for `c_G = Xbar_G + b_G`.
struct ClusterPoint {
    z: Vec<f64>,
    value: f64,
    /// `(C^T grad^2 V C)^{-1}`
    inv_curv: DMatrix<f64>,
}

fn cluster_point(
    u: &UtilitySpec,
    c: &[f64],
    groups: &[Vec<usize>],
    cfg: &SolverConfig,
    stream: u64,
) -> Result<ClusterPoint> {
    let n = u.n();
    let k = groups.len();
    let expand = |z: &[f64]| -> Vec<f64> {
        let mut w = vec![0.0; n];
        for (g, members) in groups.iter().enumerate() {
            for &j in members {
                w[j] = z[g];
            }
        }
        w
    };
    let mut rng = cfg.jitter_rng(stream);
    let mut level = vec![0.0; n];
    for (g, members) in groups.iter().enumerate() {
        for &j in members {
            level[j] = c[g] / members.len() as f64;
        }
    }
    let grad0 = u.gradient(&level)?;
    let z0: Vec<f64> = groups
        .iter()
        .map(|members| {
            let mean = members.iter().map(|&j| grad0[j]).sum::<f64>() / members.len() as f64;
            mean * cfg.jitter(&mut rng).exp()
        })
        .collect();

    let neg_objective = |z: &[f64]| -> f64 {
        if z.iter().any(|v| v.is_nan() || *v <= 0.0) {
            return f64::NEG_INFINITY;
        }
        match inner_max(u, &expand(z), None) {
            Ok(r) => -(z.iter().zip(c).map(|(a, b)| a * b).sum::<f64>() + r.value),
            Err(_) => f64::NEG_INFINITY,
        }
    };
    let collapse = |r: &InnerMax| -> (Vec<f64>, DMatrix<f64>) {
        let curv = r.curvature.as_ref().expect("smooth family");
        let mut grad = c.to_vec();
        let mut h = DMatrix::zeros(k, k);
        for (g, mg) in groups.iter().enumerate() {
            for &j in mg {
                grad[g] -= r.x[j];
            }
            for (f, mf) in groups.iter().enumerate() {
                h[(g, f)] = mg
                    .iter()
                    .map(|&i| mf.iter().map(|&j| curv[(i, j)]).sum::<f64>())
                    .sum::<f64>();
            }
        }
        (grad, h)
    };
    let neg_grad_hess = |z: &[f64]| -> Result<(Vec<f64>, DMatrix<f64>)> {
        let r = inner_max(u, &expand(z), None)?;
        let (g, h) = collapse(&r);
        Ok((g.iter().map(|v| -v).collect(), -h))
    };
    let opts = NewtonOptions {
        tol: cfg.newton_tol,
        max_iter: cfg.max_iter,
        grad_scale: None,
        scale_floor: 1.0,
    };
    let r = maximize_constrained(neg_objective, neg_grad_hess, &z0, &[], &opts)?;
    let inv_curv = (-r.hess)
        .try_inverse()
        .ok_or_else(|| Error::Assembly("singular dual curvature".into()))?;
    Ok(ClusterPoint {
        z: r.x,
        value: -r.value,
        inv_curv,
    })
}

fn cluster_z(
    space: &ScenarioSpace,
    x: &Allocation,
    u: &UtilitySpec,
    budget: f64,
    groups: &[Vec<usize>],
    cfg: &SolverConfig,
) -> Result<Allocation> {
    let k = groups.len();
    let m = space.len();
    let probs = space.probs();
    let xbar: Vec<Vec<f64>> = groups
        .iter()
        .map(|g| {
            (0..m)
                .map(|w| g.iter().map(|&j| x.get(j, w)).sum())
                .collect()
        })
        .collect();
    let solve_all = |b: &[f64]| -> Result<Vec<ClusterPoint>> {
        map_indexed(m, cfg.parallel, |w| {
            let c: Vec<f64> = (0..k).map(|g| xbar[g][w] + b[g]).collect();
            cluster_point(u, &c, groups, cfg, w as u64).map_err(|e| e.in_scenario(w))
        })
    };
    let cache: RefCell<Option<(Vec<f64>, Vec<ClusterPoint>)>> = RefCell::new(None);
    let with_points = |b: &[f64], f: &mut dyn FnMut(&[ClusterPoint])| -> Result<()> {
        let hit = cache.borrow().as_ref().is_some_and(|(cb, _)| cb == b);
        if !hit {
            let pts = solve_all(b)?;
            *cache.borrow_mut() = Some((b.to_vec(), pts));
        }
        f(&cache.borrow().as_ref().unwrap().1);
        Ok(())
    };
    let value = |b: &[f64]| {
        let mut v = f64::NEG_INFINITY;
        match with_points(b, &mut |pts| v = weighted_sum(probs, |w| pts[w].value)) {
            Ok(()) => v,
            Err(_) => f64::NEG_INFINITY,
        }
    };
    let grad_hess = |b: &[f64]| -> Result<(Vec<f64>, DMatrix<f64>)> {
        let mut out = (Vec::new(), DMatrix::zeros(k, k));
        with_points(b, &mut |pts| {
            out.0 = (0..k)
                .map(|g| weighted_sum(probs, |w| pts[w].z[g]))
                .collect();
            for (p, pt) in probs.iter().zip(pts) {
                out.1 -= &pt.inv_curv * *p;
            }
        })?;
        Ok(out)
    };
    let n = u.n() as f64;
    let mut rng = cfg.jitter_rng(u64::MAX - 1);
    let mut b0: Vec<f64> = groups.iter().map(|g| budget * g.len() as f64 / n).collect();
    let noise: Vec<f64> = (0..k).map(|_| cfg.jitter(&mut rng)).collect();
    let mean = noise.iter().sum::<f64>() / k as f64;
    for (b, e) in b0.iter_mut().zip(&noise) {
        *b += e - mean;
    }
    let opts = NewtonOptions {
        tol: cfg.outer_tol,
        max_iter: cfg.max_iter,
        grad_scale: None,
        scale_floor: 1.0,
    };
    let all = vec![(0..k).collect::<Vec<_>>()];
    let r = maximize_constrained(value, grad_hess, &b0, &all, &opts)?;
    let pts = solve_all(&r.x)?;
    let mut z = Allocation::zeros(k, m);
    for (w, pt) in pts.iter().enumerate() {
        for g in 0..k {
            z.set(g, w, pt.z[g]);
        }
    }
    Ok(z)
}
