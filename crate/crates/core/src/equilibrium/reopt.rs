//! Single-agent re-optimization `max_Z sum_w p_w phi_w(c_w + Z_w - E_Q[Z])`
//! for concave scenario slices `phi_w`.
//!
//! The objective is invariant under constant shifts of `Z`, so it is solved on
//! `E_Q[Z] = 0` through its Lagrangian: for a multiplier `nu` every scenario
//! solves `phi_w'(x) = nu q_w` on its own, and `nu` is tuned until the
//! constraint holds. The best value is always evaluated at the re-centred
//! candidate, so it is a genuine lower bound on the supremum.

use crate::error::Result;
use crate::optim::scalar::{bracket_increasing, illinois, safeguarded_newton};
use crate::utility::CoordinateSlice;

pub(crate) struct Reoptimized {
    pub best: f64,
    pub current: f64,
}

fn centred_value(
    probs: &[f64],
    q: &[f64],
    slices: &[CoordinateSlice],
    base: &[f64],
    z: &[f64],
) -> f64 {
    let mean = probs
        .iter()
        .zip(q)
        .zip(z)
        .fold(0.0, |acc, ((p, q), z)| acc + p * q * z);
    probs.iter().enumerate().fold(0.0, |acc, (w, p)| {
        acc + p * slices[w].value(base[w] + z[w] - mean)
    })
}

/// Position `x` with `phi'(x) = target` (in the subdifferential sense at kinks).
fn solve_slice(slice: &CoordinateSlice, target: f64, start: f64, smooth: bool) -> Result<f64> {
    let ln_target = target.ln();
    let h = |x: f64| {
        let d = slice.deriv(x).1;
        if d.is_nan() {
            f64::NAN
        } else {
            ln_target - d.ln()
        }
    };
    let (lo, hi) = bracket_increasing(h, start, 0.5, 200)?;
    if lo == hi {
        return Ok(lo);
    }
    if smooth {
        safeguarded_newton(
            |x| {
                let d = slice.deriv(x).1;
                let dd = slice.second(x).unwrap_or(f64::NAN);
                (ln_target - d.ln(), -dd / d)
            },
            lo,
            hi,
            start.clamp(lo, hi),
            1e-15,
            200,
        )
    } else {
        // Bisection converges onto a kink when the target sits in its jump.
        let (mut lo, mut hi) = (lo, hi);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if hi - lo <= 1e-15 * (1.0 + mid.abs()) {
                break;
            }
            if h(mid) < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(0.5 * (lo + hi))
    }
}

pub(crate) fn reoptimize(
    probs: &[f64],
    q: &[f64],
    slices: &[CoordinateSlice],
    base: &[f64],
    current: &[f64],
    smooth: bool,
) -> Result<Reoptimized> {
    let m = probs.len();
    let current_value = centred_value(probs, q, slices, base, current);
    let starts: Vec<f64> = (0..m).map(|w| base[w] + current[w]).collect();
    // E_Q[x] must equal E_Q[base] on the constraint
    let target: f64 = (0..m).map(|w| probs[w] * q[w] * base[w]).sum();

    let positions = |nu: f64| -> Result<Vec<f64>> {
        (0..m)
            .map(|w| solve_slice(&slices[w], nu * q[w], starts[w], smooth))
            .collect()
    };
    // G(t) = target - E_Q[x(e^t)] is increasing in t.
    let gap = |t: f64| {
        positions(t.exp()).map_or(f64::NAN, |x| {
            target - (0..m).map(|w| probs[w] * q[w] * x[w]).sum::<f64>()
        })
    };

    let nu0: f64 = (0..m)
        .map(|w| probs[w] * slices[w].deriv(starts[w]).1)
        .sum();
    let t0 = nu0.ln();
    let (lo, hi) = bracket_increasing(gap, t0, 0.5, 200)?;
    let t = if lo == hi {
        lo
    } else if smooth {
        let mut failure = None;
        let t = safeguarded_newton(
            |t| {
                let nu = t.exp();
                match positions(nu) {
                    Ok(x) => {
                        let mut g = target;
                        let mut dg = 0.0;
                        for w in 0..m {
                            g -= probs[w] * q[w] * x[w];
                            // dx/dnu = q / phi''(x)
                            let curv = slices[w].second(x[w]).unwrap_or(f64::NAN);
                            dg -= nu * probs[w] * q[w] * q[w] / curv;
                        }
                        (g, dg)
                    }
                    Err(e) => {
                        failure = Some(e);
                        (f64::NAN, f64::NAN)
                    }
                }
            },
            lo,
            hi,
            t0.clamp(lo, hi),
            1e-15,
            200,
        )?;
        if let Some(e) = failure {
            return Err(e);
        }
        t
    } else {
        illinois(gap, lo, hi, 1e-15, 400)?
    };
    let x = positions(t.exp())?;
    let z: Vec<f64> = (0..m).map(|w| x[w] - base[w]).collect();
    let best = centred_value(probs, q, slices, base, &z).max(current_value);
    Ok(Reoptimized {
        best,
        current: current_value,
    })
}
