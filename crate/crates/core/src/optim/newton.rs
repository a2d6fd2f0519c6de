//! Damped Newton for smooth concave maximization under group-sum equality
//! constraints: for every group `G`, `sum_{i in G} x_i` stays at its initial
//! value. Coordinates outside every group are free.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct NewtonOptions {
    /// Stop once the projected gradient is below `tol * max(scale_floor, grad_scale)`.
    pub tol: f64,
    pub max_iter: usize,
    /// Defaults to the sup-norm of the current gradient when `None`.
    pub grad_scale: Option<f64>,
    /// One suits problems whose gradient vanishes at the optimum; constrained
    /// problems keep a nonzero gradient there and can use a purely relative test.
    pub scale_floor: f64,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        NewtonOptions {
            tol: 1e-11,
            max_iter: 200,
            grad_scale: None,
            scale_floor: 1.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct NewtonResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub grad: Vec<f64>,
    pub hess: DMatrix<f64>,
    /// One multiplier per group: the mean of the gradient over the group.
    pub multipliers: Vec<f64>,
    pub residual: f64,
    pub iterations: usize,
}

fn sup_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn project(grad: &[f64], groups: &[Vec<usize>]) -> (Vec<f64>, Vec<f64>) {
    let mut r = grad.to_vec();
    let mut mult = Vec::with_capacity(groups.len());
    for g in groups {
        let mu = g.iter().map(|&i| grad[i]).sum::<f64>() / g.len() as f64;
        for &i in g {
            r[i] -= mu;
        }
        mult.push(mu);
    }
    (r, mult)
}

/// Solves `[H sC^T; sC 0] [d; nu] = [-g; 0]`, shifting `H` towards `-I` when
/// the system is singular or the step is not an ascent direction. The
/// constraint rows carry the Hessian's scale `s`, otherwise LU loses them
/// once curvature grows far beyond one.
fn newton_step(grad: &[f64], hess: &DMatrix<f64>, groups: &[Vec<usize>]) -> Vec<f64> {
    let n = grad.len();
    let k = groups.len();
    let scale = hess
        .diagonal()
        .iter()
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(1e-300);
    let mut shift = 0.0;
    for _ in 0..30 {
        let mut kkt = DMatrix::zeros(n + k, n + k);
        kkt.view_mut((0, 0), (n, n)).copy_from(hess);
        for i in 0..n {
            kkt[(i, i)] -= shift;
        }
        for (gi, g) in groups.iter().enumerate() {
            for &i in g {
                kkt[(n + gi, i)] = scale;
                kkt[(i, n + gi)] = scale;
            }
        }
        let mut rhs = DVector::zeros(n + k);
        for i in 0..n {
            rhs[i] = -grad[i];
        }
        if let Some(sol) = kkt.lu().solve(&rhs) {
            let mut d: Vec<f64> = sol.iter().take(n).copied().collect();
            // Remove the rounding component normal to the constraints.
            for g in groups {
                let mean = g.iter().map(|&i| d[i]).sum::<f64>() / g.len() as f64;
                for &i in g {
                    d[i] -= mean;
                }
            }
            let ascent: f64 = d.iter().zip(grad).map(|(a, b)| a * b).sum();
            if d.iter().all(|v| v.is_finite()) && ascent >= 0.0 {
                return d;
            }
        }
        shift = if shift == 0.0 {
            1e-10 * scale
        } else {
            shift * 100.0
        };
    }
    project(grad, groups).0
}

/// Maximizes a concave function from a feasible starting point.
///
/// `value` may return `-inf` for points outside the numerically safe region;
/// the line search then backtracks.
pub fn maximize_constrained<F, G>(
    value: F,
    grad_hess: G,
    x0: &[f64],
    groups: &[Vec<usize>],
    opts: &NewtonOptions,
) -> Result<NewtonResult>
where
    F: Fn(&[f64]) -> f64,
    G: Fn(&[f64]) -> Result<(Vec<f64>, DMatrix<f64>)>,
{
    let n = x0.len();
    let targets: Vec<f64> = groups
        .iter()
        .map(|g| g.iter().map(|&i| x0[i]).sum())
        .collect();
    let mut x = x0.to_vec();
    let mut f = value(&x);
    if !f.is_finite() {
        return Err(Error::non_convergence(
            "newton (infeasible start)",
            0,
            f64::INFINITY,
            &x,
        ));
    }
    let mut residual = f64::INFINITY;
    for iter in 0..=opts.max_iter {
        let (grad, hess) = grad_hess(&x)?;
        let (r, multipliers) = project(&grad, groups);
        residual = sup_norm(&r);
        let scale = opts
            .grad_scale
            .unwrap_or_else(|| sup_norm(&grad))
            .max(opts.scale_floor);
        if residual <= opts.tol * scale {
            return Ok(NewtonResult {
                x,
                value: f,
                grad,
                hess,
                multipliers,
                residual,
                iterations: iter,
            });
        }
        if iter == opts.max_iter {
            break;
        }
        let d = newton_step(&grad, &hess, groups);
        let slope: f64 = d.iter().zip(&grad).map(|(a, b)| a * b).sum();
        let mut t = 1.0;
        let mut moved = false;
        let mut trial = vec![0.0; n];
        for _ in 0..60 {
            for i in 0..n {
                trial[i] = x[i] + t * d[i];
            }
            for (g, target) in groups.iter().zip(&targets) {
                let drift = (g.iter().map(|&i| trial[i]).sum::<f64>() - target) / g.len() as f64;
                for &i in g {
                    trial[i] -= drift;
                }
            }
            let ft = value(&trial);
            // Near the optimum the value no longer resolves the ascent; accept
            // full steps whose predicted gain is below rounding.
            let negligible = slope <= 1e-14 * (1.0 + f.abs()) && t == 1.0 && ft.is_finite();
            if ft.is_finite() && (ft >= f + 1e-4 * t * slope || negligible) {
                moved = trial != x;
                x.copy_from_slice(&trial);
                f = ft;
                break;
            }
            t *= 0.5;
        }
        if !moved {
            let (grad, hess) = grad_hess(&x)?;
            let (r, multipliers) = project(&grad, groups);
            residual = sup_norm(&r);
            let scale = opts
                .grad_scale
                .unwrap_or_else(|| sup_norm(&grad))
                .max(opts.scale_floor);
            // Stalled at rounding level: accept if within three orders of the tolerance.
            if residual <= 1e3 * opts.tol * scale {
                return Ok(NewtonResult {
                    x,
                    value: f,
                    grad,
                    hess,
                    multipliers,
                    residual,
                    iterations: iter + 1,
                });
            }
            return Err(Error::non_convergence(
                "newton (line search stalled)",
                iter + 1,
                residual,
                &x,
            ));
        }
    }
    Err(Error::non_convergence(
        "newton",
        opts.max_iter,
        residual,
        &x,
    ))
}
