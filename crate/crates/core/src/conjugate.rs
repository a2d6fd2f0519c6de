//! Convex conjugate `V(w) = sup_x (U(x) - <x, w>)` on the closed positive orthant.
//!
//! The numeric inner maximization is the reference implementation. Closed
//! forms exist for `EXP_PAIRWISE` and `SUM_EXP`; the former is checked against
//! the numeric route in the tests below before any solver relies on it.
//!
//! Coordinates with `w_j = 0` are saturated: the supremum pushes `x_j` to
//! `+inf`, where every catalogue family stays bounded, so `V` is finite on the
//! whole orthant.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kink::polish;
use crate::optim::{maximize_constrained, nelder_mead, NelderMeadOptions, NewtonOptions};
use crate::utility::{Family, UtilitySpec};

/// Gradient tolerance of the inner maximization.
pub const INNER_TOL: f64 = 1e-12;
/// Iterates beyond this norm are taken as an unbounded ascent.
const DIVERGENCE_NORM: f64 = 1e6;
const RESTART_SEED: u64 = 0x5eed_c0de;

/// `t ln t`, continuously extended by 0 at the origin.
#[inline]
fn xlogx(t: f64) -> f64 {
    if t == 0.0 {
        0.0
    } else {
        t * t.ln()
    }
}

/// Outcome of the inner maximization.
#[derive(Debug, Clone)]
pub struct InnerMax {
    /// Maximizer; `+inf` in saturated coordinates. Equals `-grad V(w)`.
    pub x: Vec<f64>,
    pub value: f64,
    /// `grad^2 V(w) = -H(x)^{-1}` on the free coordinates, zero elsewhere;
    /// `None` where `U` has no Hessian.
    pub curvature: Option<DMatrix<f64>>,
    /// Produced by a derivative-free search.
    pub approximate: bool,
}

impl InnerMax {
    /// `grad V(w)`.
    pub fn gradient(&self) -> Vec<f64> {
        self.x.iter().map(|v| -v).collect()
    }
}

fn check_weights(u: &UtilitySpec, w: &[f64]) -> Result<()> {
    if w.len() != u.n() {
        return Err(Error::Dimension(format!(
            "w has {} entries, utility has {}",
            w.len(),
            u.n()
        )));
    }
    if let Some(v) = w.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
        return Err(Error::Invalid(format!(
            "conjugate weight {v} is not finite and nonnegative"
        )));
    }
    Ok(())
}

/// Closed-form `V(w)` where one is available.
pub fn conjugate_analytic(u: &UtilitySpec, w: &[f64]) -> Option<f64> {
    match u {
        UtilitySpec::ExpPairwise { alpha } => {
            let n = alpha.len() as f64;
            let mut s_total = 0.0;
            let mut acc = 0.0;
            for (a, wj) in alpha.iter().zip(w) {
                let s = wj / a;
                s_total += s;
                acc += xlogx(s);
            }
            Some(0.5 * n * n + acc - 0.5 * s_total - 0.5 * xlogx(s_total))
        }
        UtilitySpec::SumExp { alpha } => Some(
            alpha
                .iter()
                .zip(w)
                .map(|(a, wj)| {
                    let s = wj / a;
                    1.0 - s + xlogx(s)
                })
                .sum(),
        ),
        _ => None,
    }
}

/// Closed-form maximizer and curvature for the exponential families.
fn analytic_inner(u: &UtilitySpec, w: &[f64]) -> Option<InnerMax> {
    let value = conjugate_analytic(u, w)?;
    let n = w.len();
    let alpha = u.alpha();
    let s: Vec<f64> = alpha.iter().zip(w).map(|(a, wj)| wj / a).collect();
    let mut curv = DMatrix::zeros(n, n);
    let x: Vec<f64> = match u.family() {
        Family::ExpPairwise => {
            let total: f64 = s.iter().sum();
            let half_log = 0.5 * total.ln();
            for i in 0..n {
                for j in 0..n {
                    if s[i] > 0.0 && s[j] > 0.0 {
                        curv[(i, j)] = -0.5 / (alpha[i] * alpha[j] * total);
                    }
                }
                if s[i] > 0.0 {
                    curv[(i, i)] += 1.0 / (alpha[i] * w[i]);
                }
            }
            (0..n)
                .map(|j| {
                    if s[j] > 0.0 {
                        -(s[j].ln() - half_log) / alpha[j]
                    } else {
                        f64::INFINITY
                    }
                })
                .collect()
        }
        Family::SumExp => (0..n)
            .map(|j| {
                if s[j] > 0.0 {
                    curv[(j, j)] = 1.0 / (alpha[j] * w[j]);
                    -s[j].ln() / alpha[j]
                } else {
                    f64::INFINITY
                }
            })
            .collect(),
        _ => return None,
    };
    Some(InnerMax {
        x,
        value,
        curvature: Some(curv),
        approximate: false,
    })
}

/// Starting point near the stationary structure of the exponential families.
pub fn default_start(u: &UtilitySpec, w: &[f64]) -> Vec<f64> {
    let n = u.n() as f64;
    u.alpha()
        .iter()
        .zip(w)
        .map(|(a, wj)| (a * n / wj.max(1e-12)).ln() / a)
        .collect()
}

struct Reduced<'a> {
    u: &'a UtilitySpec,
    w: &'a [f64],
    free: Vec<usize>,
}

impl Reduced<'_> {
    fn embed(&self, z: &[f64]) -> Vec<f64> {
        let mut x = vec![f64::INFINITY; self.w.len()];
        for (k, &j) in self.free.iter().enumerate() {
            x[j] = z[k];
        }
        x
    }

    fn value(&self, z: &[f64]) -> f64 {
        let x = self.embed(z);
        let lin: f64 = self.free.iter().zip(z).map(|(&j, zj)| self.w[j] * zj).sum();
        self.u.evaluate(&x) - lin
    }

    fn grad_hess(&self, z: &[f64]) -> Result<(Vec<f64>, DMatrix<f64>)> {
        let x = self.embed(z);
        let (g, h) = self.u.grad_hess(&x)?;
        let k = self.free.len();
        let grad = self.free.iter().map(|&j| g[j] - self.w[j]).collect();
        let hess = DMatrix::from_fn(k, k, |a, b| h[(self.free[a], self.free[b])]);
        Ok((grad, hess))
    }
}

fn single_start(
    u: &UtilitySpec,
    w: &[f64],
    start: &[f64],
    tol: f64,
    max_iter: usize,
) -> Result<InnerMax> {
    let red = Reduced {
        u,
        w,
        free: (0..w.len()).filter(|&j| w[j] > 0.0).collect(),
    };
    let z0: Vec<f64> = red.free.iter().map(|&j| start[j]).collect();
    let grad_scale = w.iter().fold(0.0f64, |m, v| m.max(*v));

    if !u.is_differentiable() {
        let opts = NelderMeadOptions {
            initial_step: 0.5,
            tol: 1e-11,
            max_evals: 100_000,
            restarts: 4,
        };
        let r = nelder_mead(|z| -red.value(z), &z0, &opts);
        if r.x.iter().any(|v| v.abs() > DIVERGENCE_NORM) {
            return Ok(diverged(w.len()));
        }
        let x = red.embed(&r.x);
        let active: Vec<bool> = w.iter().map(|v| *v > 0.0).collect();
        if let Some(p) = polish(u, &x, w, &[], &active) {
            let z: Vec<f64> = red.free.iter().map(|&j| p.x[j]).collect();
            let value = red.value(&z);
            if value >= -r.value - 1e-12 * (1.0 + r.value.abs()) {
                return Ok(InnerMax {
                    x: p.x,
                    value,
                    curvature: None,
                    approximate: true,
                });
            }
        }
        return Ok(InnerMax {
            x,
            value: -r.value,
            curvature: None,
            approximate: true,
        });
    }

    let opts = NewtonOptions {
        tol,
        max_iter,
        grad_scale: Some(grad_scale),
        scale_floor: 1.0,
    };
    let r = maximize_constrained(|z| red.value(z), |z| red.grad_hess(z), &z0, &[], &opts)?;
    if r.x.iter().any(|v| v.abs() > DIVERGENCE_NORM) {
        return Ok(diverged(w.len()));
    }
    let k = red.free.len();
    let mut curv = DMatrix::zeros(w.len(), w.len());
    if k > 0 {
        let neg_h = -r.hess.clone();
        let inv = neg_h
            .cholesky()
            .map(|c| c.inverse())
            .or_else(|| (-r.hess.clone()).try_inverse())
            .ok_or_else(|| {
                Error::non_convergence("conjugate curvature", r.iterations, r.residual, &r.x)
            })?;
        for a in 0..k {
            for b in 0..k {
                curv[(red.free[a], red.free[b])] = inv[(a, b)];
            }
        }
    }
    Ok(InnerMax {
        x: red.embed(&r.x),
        value: r.value,
        curvature: Some(curv),
        approximate: false,
    })
}

fn diverged(n: usize) -> InnerMax {
    InnerMax {
        x: vec![f64::NAN; n],
        value: f64::INFINITY,
        curvature: None,
        approximate: false,
    }
}

/// Numeric `V(w)` by multi-start damped Newton (derivative-free search for
/// non-differentiable families). This is the reference route.
pub fn conjugate_numeric(u: &UtilitySpec, w: &[f64]) -> Result<InnerMax> {
    check_weights(u, w)?;
    let base = default_start(u, w);
    let mut rng = ChaCha8Rng::seed_from_u64(RESTART_SEED);
    let mut starts = vec![base.clone()];
    for _ in 0..2 {
        starts.push(
            base.iter()
                .zip(u.alpha())
                .map(|(x, a)| x + rng.gen_range(-2.0..2.0) / a)
                .collect(),
        );
    }
    let mut best: Option<InnerMax> = None;
    let mut last_err = None;
    for s in &starts {
        match single_start(u, w, s, INNER_TOL, 500) {
            Ok(r) if best.as_ref().is_none_or(|b| r.value > b.value) => best = Some(r),
            Ok(_) => {}
            Err(e) => last_err = Some(e),
        }
    }
    best.ok_or_else(|| last_err.unwrap())
}

/// Inner maximizer for solver loops: closed form when available, otherwise a
/// single Newton run from `warm` (falling back to the multi-start route).
pub fn inner_max(u: &UtilitySpec, w: &[f64], warm: Option<&[f64]>) -> Result<InnerMax> {
    if let Some(r) = analytic_inner(u, w) {
        return Ok(r);
    }
    check_weights(u, w)?;
    let start = match warm {
        Some(x) if x.iter().all(|v| v.is_finite()) => x.to_vec(),
        _ => default_start(u, w),
    };
    single_start(u, w, &start, INNER_TOL, 200).or_else(|_| conjugate_numeric(u, w))
}

/// `V(w)` as an extended real; `+inf` when the supremum diverges.
pub fn conjugate_eval(u: &UtilitySpec, w: &[f64]) -> f64 {
    if check_weights(u, w).is_err() {
        return f64::NAN;
    }
    if let Some(v) = conjugate_analytic(u, w) {
        return v;
    }
    if w.iter().all(|v| *v == 0.0) {
        return u.sup_value();
    }
    conjugate_numeric(u, w).map_or(f64::INFINITY, |r| r.value)
}

/// `V(z, ..., z)`.
pub fn conjugate_diag(u: &UtilitySpec, z: f64) -> f64 {
    conjugate_eval(u, &vec![z; u.n()])
}

/// `d/dz V(z 1)`, by the envelope theorem `-sum_j x*_j`.
pub fn conjugate_diag_derivative(u: &UtilitySpec, z: f64) -> Result<f64> {
    if !(z > 0.0 && z.is_finite()) {
        return Err(Error::Invalid(format!(
            "diagonal derivative needs z > 0, got {z}"
        )));
    }
    let r = inner_max(u, &vec![z; u.n()], None)?;
    Ok(-r.x.iter().sum::<f64>())
}

/// `d^2/dz^2 V(z 1) = 1^T grad^2 V 1`.
pub fn conjugate_diag_second(u: &UtilitySpec, z: f64) -> Result<f64> {
    if !(z > 0.0 && z.is_finite()) {
        return Err(Error::Invalid(format!(
            "diagonal curvature needs z > 0, got {z}"
        )));
    }
    let r = inner_max(u, &vec![z; u.n()], None)?;
    r.curvature.map(|c| c.sum()).ok_or(Error::NonDifferentiable)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::utility::Aggregator;

    fn families(n: usize, rng: &mut ChaCha8Rng) -> Vec<UtilitySpec> {
        let alpha: Vec<f64> = (0..n).map(|_| rng.gen_range(0.5..3.0)).collect();
        let beta: Vec<f64> = (0..n).map(|_| rng.gen_range(0.1..1.0)).collect();
        vec![
            UtilitySpec::exp_pairwise(alpha.clone()).unwrap(),
            UtilitySpec::sum_exp(alpha.clone()).unwrap(),
            UtilitySpec::sum_plus_agg(
                alpha.clone(),
                beta.clone(),
                Aggregator::Exponential { p: 0.8 },
            )
            .unwrap(),
            UtilitySpec::sum_plus_agg(alpha.clone(), beta.clone(), Aggregator::Rational { p: 2.0 })
                .unwrap(),
            UtilitySpec::sum_plus_agg(alpha.clone(), beta, Aggregator::Arctan { p: 1.5 }).unwrap(),
            UtilitySpec::sum_exp_plus_kink(alpha, vec![0.5; n], vec![0.0; n], 1.0).unwrap(),
        ]
    }

    /// Coarse grid plus coordinate-wise golden refinement, no derivatives.
    fn brute_force_sup(u: &UtilitySpec, w: &[f64]) -> f64 {
        assert_eq!(u.n(), 2);
        let obj = |x: &[f64]| u.evaluate(x) - x[0] * w[0] - x[1] * w[1];
        let mut best = (f64::NEG_INFINITY, [0.0, 0.0]);
        for i in 0..=400 {
            for j in 0..=400 {
                let x = [-4.0 + 0.02 * i as f64, -4.0 + 0.02 * j as f64];
                let v = obj(&x);
                if v > best.0 {
                    best = (v, x);
                }
            }
        }
        let mut x = best.1;
        for _ in 0..60 {
            for k in 0..2 {
                let (lo, hi) = (x[k] - 0.05, x[k] + 0.05);
                let (arg, _) = crate::optim::scalar::golden_section(
                    |t| {
                        let mut y = x;
                        y[k] = t;
                        -obj(&y)
                    },
                    lo,
                    hi,
                    1e-13,
                    200,
                );
                x[k] = arg;
            }
        }
        obj(&x)
    }

    #[test]
    fn pairwise_unit_weights_match_brute_force() {
        let u = UtilitySpec::exp_pairwise(vec![1.0, 1.0]).unwrap();
        let brute = brute_force_sup(&u, &[1.0, 1.0]);
        let numeric = conjugate_numeric(&u, &[1.0, 1.0]).unwrap().value;
        let expected = 1.0 - 2f64.ln();
        assert!((brute - expected).abs() < 1e-9, "{brute}");
        assert!((numeric - expected).abs() < 1e-12, "{numeric}");
        assert!((conjugate_analytic(&u, &[1.0, 1.0]).unwrap() - expected).abs() < 1e-15);
    }

    #[test]
    fn printed_closed_form_is_off_by_the_linear_term() {
        // The literature form adds sum_j w_j/alpha_j to the true conjugate.
        let alpha = [0.7, 1.9];
        let w = [0.4, 1.3];
        let u = UtilitySpec::exp_pairwise(alpha.to_vec()).unwrap();
        let s: Vec<f64> = w.iter().zip(&alpha).map(|(w, a)| w / a).collect();
        let total: f64 = s.iter().sum();
        let printed = 2.0 + s.iter().map(|s| s + s * s.ln()).sum::<f64>()
            - 0.5 * total
            - 0.5 * total * total.ln();
        let numeric = conjugate_numeric(&u, &w).unwrap().value;
        assert!((printed - numeric - total).abs() < 1e-11);
        assert!((brute_force_sup(&u, &w) - numeric).abs() < 1e-9);
    }

    #[test]
    fn analytic_and_numeric_agree_on_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..100 {
            let n = rng.gen_range(1..6);
            let alpha: Vec<f64> = (0..n).map(|_| rng.gen_range(0.3..4.0)).collect();
            let w: Vec<f64> = (0..n).map(|_| rng.gen_range(0.01..5.0)).collect();
            for u in [
                UtilitySpec::exp_pairwise(alpha.clone()).unwrap(),
                UtilitySpec::sum_exp(alpha.clone()).unwrap(),
            ] {
                let a = conjugate_analytic(&u, &w).unwrap();
                let num = conjugate_numeric(&u, &w).unwrap();
                assert!(
                    (a - num.value).abs() <= 1e-8 * a.abs().max(1.0),
                    "{a} vs {}",
                    num.value
                );
                let exact = analytic_inner(&u, &w).unwrap();
                for (x, y) in exact.x.iter().zip(&num.x) {
                    assert!((x - y).abs() < 1e-8);
                }
                let (c1, c2) = (exact.curvature.unwrap(), num.curvature.unwrap());
                assert!((c1 - c2).amax() < 1e-6 * (1.0 + w.iter().map(|v| 1.0 / v).sum::<f64>()));
            }
        }
    }

    #[test]
    fn zero_weights_give_the_supremum() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        for u in families(3, &mut rng) {
            assert!((conjugate_eval(&u, &[0.0; 3]) - u.sup_value()).abs() < 1e-12);
        }
        let u = UtilitySpec::exp_pairwise(vec![1.0, 1.0]).unwrap();
        assert_eq!(conjugate_eval(&u, &[0.0, 0.0]), 2.0);
        assert_eq!(conjugate_diag(&u, 0.0), 2.0);
    }

    #[test]
    fn partial_saturation_matches_analytic() {
        let u = UtilitySpec::exp_pairwise(vec![1.0, 2.0, 0.5]).unwrap();
        let w = [0.3, 0.0, 1.1];
        let num = conjugate_numeric(&u, &w).unwrap();
        assert!((num.value - conjugate_analytic(&u, &w).unwrap()).abs() < 1e-12);
        assert_eq!(num.x[1], f64::INFINITY);
    }

    #[test]
    fn sum_exp_diagonal_matches_univariate_form() {
        let alpha = vec![0.5, 1.0, 2.5];
        let u = UtilitySpec::sum_exp(alpha.clone()).unwrap();
        for z in [0.1, 0.7, 3.0] {
            let expected: f64 = alpha
                .iter()
                .map(|a| 1.0 - z / a + (z / a) * (z / a).ln())
                .sum();
            let num = conjugate_numeric(&u, &[z; 3]).unwrap().value;
            assert!((num - expected).abs() < 1e-12);
            assert!((conjugate_diag(&u, z) - expected).abs() < 1e-14);
        }
    }

    #[test]
    fn fenchel_inequality_and_lower_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..200 {
            let n = rng.gen_range(1..4);
            for u in families(n, &mut rng) {
                let w: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..3.0)).collect();
                let v = conjugate_eval(&u, &w);
                assert!(v >= u.evaluate(&vec![0.0; n]) - 1e-9);
                for _ in 0..5 {
                    let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..3.0)).collect();
                    let lin: f64 = x.iter().zip(&w).map(|(a, b)| a * b).sum();
                    assert!(u.evaluate(&x) <= lin + v + 1e-9, "{:?}", u.family());
                }
            }
        }
    }

    #[test]
    fn diagonal_derivative_matches_differences_and_is_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        for _ in 0..20 {
            let n = rng.gen_range(1..4);
            for u in families(n, &mut rng)
                .into_iter()
                .filter(|u| u.is_differentiable())
            {
                let z = rng.gen_range(0.1..10.0);
                let h = 1e-5 * z;
                let fd = (conjugate_diag(&u, z + h) - conjugate_diag(&u, z - h)) / (2.0 * h);
                let d = conjugate_diag_derivative(&u, z).unwrap();
                assert!(
                    (fd - d).abs() <= 1e-7 * d.abs().max(1.0),
                    "{:?}: {fd} vs {d}",
                    u.family()
                );
                let dd = conjugate_diag_second(&u, z).unwrap();
                let fdd = (conjugate_diag_derivative(&u, z + h).unwrap()
                    - conjugate_diag_derivative(&u, z - h).unwrap())
                    / (2.0 * h);
                assert!((fdd - dd).abs() <= 1e-5 * dd.abs().max(1.0));
                assert!(
                    conjugate_diag_derivative(&u, 2.0).unwrap()
                        >= conjugate_diag_derivative(&u, 1.0).unwrap()
                );
                let mid = conjugate_diag(&u, 0.5 * (z + 1.0));
                assert!(mid <= 0.5 * (conjugate_diag(&u, z) + conjugate_diag(&u, 1.0)) + 1e-12);
            }
        }
        assert!(conjugate_diag_derivative(&UtilitySpec::sum_exp(vec![1.0]).unwrap(), 0.0).is_err());
    }

    #[test]
    fn pairwise_diagonal_closed_form() {
        let alpha = [0.5, 1.5, 2.0];
        let u = UtilitySpec::exp_pairwise(alpha.to_vec()).unwrap();
        let beta: f64 = alpha.iter().map(|a| 1.0 / a).sum();
        let gamma: f64 = alpha.iter().map(|a| (1.0 / a) * (1.0 / a).ln()).sum();
        for z in [0.2, 1.0, 4.0] {
            let d = conjugate_diag_derivative(&u, z).unwrap();
            assert!((d - (gamma + 0.5 * beta * (z.ln() - beta.ln()))).abs() < 1e-12);
            assert!((conjugate_diag_second(&u, z).unwrap() - beta / (2.0 * z)).abs() < 1e-12);
        }
    }

    #[test]
    fn symmetric_envelope_route() {
        // alpha = 1: the maximizer is symmetric and the derivative is -sum x*.
        for n in 1..5 {
            let u = UtilitySpec::exp_pairwise(vec![1.0; n]).unwrap();
            let z = 0.8;
            let r = conjugate_numeric(&u, &vec![z; n]).unwrap();
            let spread = r.x.iter().fold(0.0f64, |m, v| m.max((v - r.x[0]).abs()));
            assert!(spread < 1e-10);
            let envelope = -r.x.iter().sum::<f64>();
            assert!((envelope - conjugate_diag_derivative(&u, z).unwrap()).abs() < 1e-10);
        }
    }

    #[test]
    fn kink_conjugate_is_approximate_but_consistent() {
        let u = UtilitySpec::sum_exp_plus_kink(vec![1.0, 1.0], vec![0.5, 0.5], vec![0.0, 0.0], 1.0)
            .unwrap();
        let w = [0.7, 1.2];
        let r = conjugate_numeric(&u, &w).unwrap();
        assert!(r.approximate);
        // With a = 1 the problem separates: 1 - e^{-x} - 0.5 x^- - w x per coordinate.
        let univariate = |w: f64| {
            let x: f64 = if w < 1.0 {
                -w.ln()
            } else if w <= 1.5 {
                0.0
            } else {
                -(w - 0.5).ln()
            };
            1.0 - (-x).exp() - 0.5 * (-x).max(0.0) - w * x
        };
        let expected = univariate(0.7) + univariate(1.2);
        assert!(
            (r.value - expected).abs() < 1e-8,
            "{} vs {expected}",
            r.value
        );
        assert!((r.value - brute_force_sup(&u, &w)).abs() < 1e-8);
    }
}
