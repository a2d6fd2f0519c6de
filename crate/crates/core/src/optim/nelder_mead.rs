//! Derivative-free simplex minimization with dimension-adaptive coefficients
//! and restarts from the incumbent, used for non-differentiable utilities.

#[derive(Debug, Clone, Copy)]
pub struct NelderMeadOptions {
    pub initial_step: f64,
    /// Convergence when both the simplex diameter and value spread drop below this.
    pub tol: f64,
    pub max_evals: usize,
    pub restarts: usize,
}

impl Default for NelderMeadOptions {
    fn default() -> Self {
        NelderMeadOptions {
            initial_step: 0.5,
            tol: 1e-10,
            max_evals: 200_000,
            restarts: 3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct NelderMeadResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub evaluations: usize,
    pub converged: bool,
}

fn one_pass<F: FnMut(&[f64]) -> f64>(
    f: &mut F,
    x0: &[f64],
    step: f64,
    tol: f64,
    budget: usize,
) -> (Vec<f64>, f64, usize, bool) {
    let d = x0.len();
    let df = d as f64;
    let (alpha, gamma, rho, sigma) = (1.0, 1.0 + 2.0 / df, 0.75 - 0.5 / df, 1.0 - 1.0 / df);
    let nan_safe = |v: f64| if v.is_nan() { f64::INFINITY } else { v };

    let mut simplex: Vec<Vec<f64>> = vec![x0.to_vec()];
    for i in 0..d {
        let mut v = x0.to_vec();
        v[i] += if x0[i].abs() > 1.0 {
            step * x0[i].abs()
        } else {
            step
        };
        simplex.push(v);
    }
    let mut vals: Vec<f64> = simplex.iter().map(|v| nan_safe(f(v))).collect();
    let mut evals = d + 1;

    while evals < budget {
        let mut order: Vec<usize> = (0..=d).collect();
        order.sort_by(|&a, &b| vals[a].total_cmp(&vals[b]));
        simplex = order.iter().map(|&i| simplex[i].clone()).collect();
        vals = order.iter().map(|&i| vals[i]).collect();

        let spread = vals[d] - vals[0];
        let diameter = simplex[1..]
            .iter()
            .map(|v| {
                v.iter()
                    .zip(&simplex[0])
                    .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()))
            })
            .fold(0.0, f64::max);
        let scale = 1.0 + simplex[0].iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if diameter <= tol * scale && spread.abs() <= tol * (1.0 + vals[0].abs()) {
            return (simplex.swap_remove(0), vals[0], evals, true);
        }

        let centroid: Vec<f64> = (0..d)
            .map(|i| simplex[..d].iter().map(|v| v[i]).sum::<f64>() / df)
            .collect();
        let towards = |t: f64| -> Vec<f64> {
            centroid
                .iter()
                .zip(&simplex[d])
                .map(|(c, w)| c + t * (c - w))
                .collect()
        };

        let xr = towards(alpha);
        let fr = nan_safe(f(&xr));
        evals += 1;
        if fr < vals[0] {
            let xe = towards(gamma);
            let fe = nan_safe(f(&xe));
            evals += 1;
            if fe < fr {
                simplex[d] = xe;
                vals[d] = fe;
            } else {
                simplex[d] = xr;
                vals[d] = fr;
            }
            continue;
        }
        if fr < vals[d - 1] {
            simplex[d] = xr;
            vals[d] = fr;
            continue;
        }
        // outside contraction when the reflection helped at all, inside otherwise
        let xc = if fr < vals[d] {
            towards(rho * alpha)
        } else {
            towards(-rho)
        };
        let fc = nan_safe(f(&xc));
        evals += 1;
        if fc < vals[d].min(fr) {
            simplex[d] = xc;
            vals[d] = fc;
            continue;
        }
        for i in 1..=d {
            let best = simplex[0].clone();
            for (v, b) in simplex[i].iter_mut().zip(&best) {
                *v = b + sigma * (*v - b);
            }
            vals[i] = nan_safe(f(&simplex[i]));
        }
        evals += d;
    }
    let best = (0..=d)
        .min_by(|&a, &b| vals[a].total_cmp(&vals[b]))
        .unwrap();
    (simplex[best].clone(), vals[best], evals, false)
}

/// Minimizes `f`; non-finite values are treated as `+inf`.
pub fn nelder_mead<F: FnMut(&[f64]) -> f64>(
    mut f: F,
    x0: &[f64],
    opts: &NelderMeadOptions,
) -> NelderMeadResult {
    if x0.is_empty() {
        let v = f(x0);
        return NelderMeadResult {
            x: Vec::new(),
            value: v,
            evaluations: 1,
            converged: true,
        };
    }
    let (mut x, mut value, mut evaluations, mut converged) =
        one_pass(&mut f, x0, opts.initial_step, opts.tol, opts.max_evals);
    let mut step = opts.initial_step;
    for _ in 0..opts.restarts {
        if evaluations >= opts.max_evals {
            break;
        }
        step *= 0.1;
        let (xr, vr, e, c) = one_pass(
            &mut f,
            &x,
            step.max(1e3 * opts.tol),
            opts.tol,
            opts.max_evals - evaluations,
        );
        evaluations += e;
        let improved = vr < value - opts.tol * (1.0 + value.abs());
        if vr <= value {
            x = xr;
            value = vr;
        }
        converged = c;
        if !improved && c {
            break;
        }
    }
    NelderMeadResult {
        x,
        value,
        evaluations,
        converged,
    }
}
