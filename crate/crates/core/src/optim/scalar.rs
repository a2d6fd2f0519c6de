//! One-dimensional root finding and minimization.

use crate::error::{Error, Result};

const GOLDEN: f64 = 0.618_033_988_749_894_9;

/// Minimizes a unimodal `f` on `[lo, hi]`; returns `(argmin, min)`.
pub fn golden_section<F: FnMut(f64) -> f64>(
    mut f: F,
    mut lo: f64,
    mut hi: f64,
    tol: f64,
    max_iter: usize,
) -> (f64, f64) {
    let mut x1 = hi - GOLDEN * (hi - lo);
    let mut x2 = lo + GOLDEN * (hi - lo);
    let (mut f1, mut f2) = (f(x1), f(x2));
    for _ in 0..max_iter {
        if (hi - lo).abs() <= tol * (1.0 + x1.abs().max(x2.abs())) {
            break;
        }
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - GOLDEN * (hi - lo);
            f1 = f(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + GOLDEN * (hi - lo);
            f2 = f(x2);
        }
    }
    if f1 <= f2 {
        (x1, f1)
    } else {
        (x2, f2)
    }
}

/// Grows `[lo, hi]` around `x0` until a nondecreasing `h` changes sign.
/// `h` may return NaN where undefined; such points are skipped by halving
/// the step back towards `x0`.
pub fn bracket_increasing<H: FnMut(f64) -> f64>(
    mut h: H,
    x0: f64,
    step: f64,
    max_doublings: usize,
) -> Result<(f64, f64)> {
    let h0 = h(x0);
    if h0 == 0.0 {
        return Ok((x0, x0));
    }
    let dir = if h0 > 0.0 { -1.0 } else { 1.0 };
    let mut prev = x0;
    let mut s = step;
    for _ in 0..max_doublings {
        let x = prev + dir * s;
        let hx = h(x);
        if hx.is_nan() {
            s *= 0.5;
            continue;
        }
        if (hx > 0.0) != (h0 > 0.0) || hx == 0.0 {
            return Ok(if dir > 0.0 { (prev, x) } else { (x, prev) });
        }
        prev = x;
        s *= 2.0;
    }
    Err(Error::non_convergence(
        "bracket search",
        max_doublings,
        h0.abs(),
        &[prev],
    ))
}

/// Newton steps below this relative size that fail to contract count as converged.
const STALL_STEP: f64 = 1e-10;

/// Root of a nondecreasing `h` inside `[lo, hi]` with `h(lo) <= 0 <= h(hi)`.
/// `hd` returns `(h, h')`; Newton steps leaving the bracket or converging
/// slowly fall back to bisection.
pub fn safeguarded_newton<H: FnMut(f64) -> (f64, f64)>(
    mut hd: H,
    mut lo: f64,
    mut hi: f64,
    x0: f64,
    tol: f64,
    max_iter: usize,
) -> Result<f64> {
    let mut x = if x0 > lo && x0 < hi {
        x0
    } else {
        0.5 * (lo + hi)
    };
    let mut last_width = hi - lo;
    let mut last_step = f64::INFINITY;
    for iter in 0..max_iter {
        let (hx, dx) = hd(x);
        if hx == 0.0 {
            return Ok(x);
        }
        if hx < 0.0 {
            lo = x;
        } else {
            hi = x;
        }
        let mut next = x - hx / dx;
        let newton_ok = dx > 0.0 && next.is_finite() && next > lo && next < hi;
        let step = (x - next).abs();
        if newton_ok && step <= tol * (1.0 + x.abs()) {
            return Ok(next);
        }
        // Tiny steps that no longer shrink mean `h` is only known to its noise
        // floor; further iterations just wander inside it.
        if newton_ok && step <= STALL_STEP * (1.0 + x.abs()) && step >= 0.5 * last_step {
            return Ok(next);
        }
        if newton_ok {
            last_step = step;
        }
        let width = hi - lo;
        if !newton_ok || (iter > 0 && width > 0.5 * last_width && (next - x).abs() > 0.5 * width) {
            next = 0.5 * (lo + hi);
        }
        last_width = width;
        if width <= tol * (1.0 + lo.abs().max(hi.abs())) {
            return Ok(0.5 * (lo + hi));
        }
        x = next;
    }
    Err(Error::non_convergence(
        "safeguarded newton",
        max_iter,
        hi - lo,
        &[x],
    ))
}

/// Illinois variant of regula falsi for a sign change on `[lo, hi]`.
pub fn illinois<H: FnMut(f64) -> f64>(
    mut h: H,
    mut lo: f64,
    mut hi: f64,
    tol: f64,
    max_iter: usize,
) -> Result<f64> {
    let (mut flo, mut fhi) = (h(lo), h(hi));
    if flo == 0.0 {
        return Ok(lo);
    }
    if fhi == 0.0 {
        return Ok(hi);
    }
    if flo.signum() == fhi.signum() {
        return Err(Error::Invalid(
            "illinois: no sign change on the bracket".into(),
        ));
    }
    let mut side = 0;
    for _ in 0..max_iter {
        let x = (lo * fhi - hi * flo) / (fhi - flo);
        let x = if x.is_finite() && x > lo.min(hi) && x < lo.max(hi) {
            x
        } else {
            0.5 * (lo + hi)
        };
        let fx = h(x);
        if fx == 0.0 || (hi - lo).abs() <= tol * (1.0 + x.abs()) {
            return Ok(x);
        }
        if fx.signum() == fhi.signum() {
            hi = x;
            fhi = fx;
            if side == -1 {
                flo *= 0.5;
            }
            side = -1;
        } else {
            lo = x;
            flo = fx;
            if side == 1 {
                fhi *= 0.5;
            }
            side = 1;
        }
    }
    Err(Error::non_convergence(
        "illinois",
        max_iter,
        (hi - lo).abs(),
        &[0.5 * (lo + hi)],
    ))
}
