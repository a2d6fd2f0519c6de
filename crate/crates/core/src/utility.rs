//! Catalogue of multivariate utility functions.
//!
//! Only families assembled from the admissible building blocks are accepted,
//! so the growth and integrability requirements hold by construction; see
//! [`UtilitySpec::validate`].

use std::f64::consts::FRAC_PI_2;
use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `ln(1e300)`: exponentials whose argument exceeds this are reported as
/// overflow instead of producing non-finite values.
pub const EXP_CAP: f64 = 690.775_527_898_213_7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Family {
    #[serde(rename = "EXP_PAIRWISE")]
    ExpPairwise,
    #[serde(rename = "SUM_EXP")]
    SumExp,
    #[serde(rename = "SUM_PLUS_AGG")]
    SumPlusAgg,
    #[serde(rename = "SUM_EXP_PLUS_KINK")]
    SumExpPlusKink,
}

impl Family {
    pub fn as_str(self) -> &'static str {
        match self {
            Family::ExpPairwise => "EXP_PAIRWISE",
            Family::SumExp => "SUM_EXP",
            Family::SumPlusAgg => "SUM_PLUS_AGG",
            Family::SumExpPlusKink => "SUM_EXP_PLUS_KINK",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "EXP_PAIRWISE" => Ok(Family::ExpPairwise),
            "SUM_EXP" => Ok(Family::SumExp),
            "SUM_PLUS_AGG" => Ok(Family::SumPlusAgg),
            "SUM_EXP_PLUS_KINK" => Ok(Family::SumExpPlusKink),
            other => Err(Error::Utility(format!("unknown family `{other}`"))),
        }
    }
}

/// `e^{-a x}`, or `None` when it would exceed `1e300`.
#[inline]
fn neg_exp(a: f64, x: f64) -> Option<f64> {
    let arg = -a * x;
    if arg > EXP_CAP {
        None
    } else {
        Some(arg.exp())
    }
}

/// Univariate aggregator `u` applied to `sum_j beta_j x_j`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Aggregator {
    /// `1 - exp(-p t)`, `p > 0`.
    Exponential { p: f64 },
    /// `p t/(t+1)` for `t >= 0`, `1 - |t-1|^p` for `t < 0`, `p > 1`.
    Rational { p: f64 },
    /// `p arctan(t)` for `t >= 0`, `1 - |t-1|^p` for `t < 0`, `p > 1`.
    Arctan { p: f64 },
}

impl Aggregator {
    pub fn p(&self) -> f64 {
        match *self {
            Aggregator::Exponential { p }
            | Aggregator::Rational { p }
            | Aggregator::Arctan { p } => p,
        }
    }

    fn validate(&self) -> Result<()> {
        let p = self.p();
        match self {
            Aggregator::Exponential { .. } if !(p > 0.0 && p.is_finite()) => Err(Error::Utility(
                format!("exponential aggregator needs p > 0, got {p}"),
            )),
            Aggregator::Rational { .. } | Aggregator::Arctan { .. }
                if !(p > 1.0 && p.is_finite()) =>
            {
                Err(Error::Utility(format!(
                    "power-tail aggregator needs p > 1, got {p}"
                )))
            }
            _ => Ok(()),
        }
    }

    pub fn sup(&self) -> f64 {
        match *self {
            Aggregator::Exponential { .. } => 1.0,
            Aggregator::Rational { p } => p,
            Aggregator::Arctan { p } => p * FRAC_PI_2,
        }
    }

    /// Negative-side power branch `1 - (1-t)^p`, overflow-guarded.
    fn power_branch(p: f64, t: f64) -> Option<f64> {
        let base = 1.0 - t;
        if p * base.ln() > EXP_CAP {
            None
        } else {
            Some(1.0 - base.powf(p))
        }
    }

    pub fn value(&self, t: f64) -> Option<f64> {
        if t == f64::INFINITY {
            return Some(self.sup());
        }
        match *self {
            Aggregator::Exponential { p } => neg_exp(p, t).map(|e| 1.0 - e),
            Aggregator::Rational { p } if t >= 0.0 => Some(p * t / (t + 1.0)),
            Aggregator::Arctan { p } if t >= 0.0 => Some(p * t.atan()),
            Aggregator::Rational { p } | Aggregator::Arctan { p } => Self::power_branch(p, t),
        }
    }

    pub fn d1(&self, t: f64) -> f64 {
        if t == f64::INFINITY {
            return 0.0;
        }
        match *self {
            Aggregator::Exponential { p } => p * (-p * t).exp(),
            Aggregator::Rational { p } if t >= 0.0 => p / ((t + 1.0) * (t + 1.0)),
            Aggregator::Arctan { p } if t >= 0.0 => p / (1.0 + t * t),
            Aggregator::Rational { p } | Aggregator::Arctan { p } => p * (1.0 - t).powf(p - 1.0),
        }
    }

    pub fn d2(&self, t: f64) -> f64 {
        if t == f64::INFINITY {
            return 0.0;
        }
        match *self {
            Aggregator::Exponential { p } => -p * p * (-p * t).exp(),
            Aggregator::Rational { p } if t >= 0.0 => -2.0 * p / (t + 1.0).powi(3),
            Aggregator::Arctan { p } if t >= 0.0 => -2.0 * p * t / (1.0 + t * t).powi(2),
            Aggregator::Rational { p } | Aggregator::Arctan { p } => {
                -p * (p - 1.0) * (1.0 - t).powf(p - 2.0)
            }
        }
    }
}

/// Multivariate utility `U: R^N -> R`.
///
/// Coordinates may be `+inf`, meaning "saturated": the corresponding
/// exponential terms vanish. The conjugate uses this for zero dual weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "UtilityConfig", into = "UtilityConfig")]
pub enum UtilitySpec {
    /// `N^2/2 - (sum_j e^{-alpha_j x_j})^2 / 2`.
    ExpPairwise { alpha: Vec<f64> },
    /// `sum_j (1 - e^{-alpha_j x_j})`.
    SumExp { alpha: Vec<f64> },
    /// `sum_j (1 - e^{-alpha_j x_j}) + u(sum_j beta_j x_j)`.
    SumPlusAgg {
        alpha: Vec<f64>,
        beta: Vec<f64>,
        agg: Aggregator,
    },
    /// `sum_j (1 - e^{-alpha_j x_j}) - (sum_j gamma_j (x_j - k_j)^-)^a`.
    SumExpPlusKink {
        alpha: Vec<f64>,
        gamma: Vec<f64>,
        kink: Vec<f64>,
        exponent: f64,
    },
}

/// Serialized form of the utility section of a run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UtilityConfig {
    pub family: Family,
    pub alpha: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub agg: Option<Aggregator>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kink: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exponent: Option<f64>,
}

impl TryFrom<UtilityConfig> for UtilitySpec {
    type Error = Error;

    fn try_from(c: UtilityConfig) -> Result<Self> {
        let missing = |what: &str| Error::Utility(format!("{} requires `{what}`", c.family));
        let spec = match c.family {
            Family::ExpPairwise => UtilitySpec::ExpPairwise {
                alpha: c.alpha.clone(),
            },
            Family::SumExp => UtilitySpec::SumExp {
                alpha: c.alpha.clone(),
            },
            Family::SumPlusAgg => UtilitySpec::SumPlusAgg {
                alpha: c.alpha.clone(),
                beta: c.beta.clone().ok_or_else(|| missing("beta"))?,
                agg: c.agg.ok_or_else(|| missing("agg"))?,
            },
            Family::SumExpPlusKink => UtilitySpec::SumExpPlusKink {
                alpha: c.alpha.clone(),
                gamma: c.gamma.clone().ok_or_else(|| missing("gamma"))?,
                kink: c.kink.clone().ok_or_else(|| missing("kink"))?,
                exponent: c.exponent.ok_or_else(|| missing("exponent"))?,
            },
        };
        spec.validate()?;
        Ok(spec)
    }
}

impl From<UtilitySpec> for UtilityConfig {
    fn from(spec: UtilitySpec) -> Self {
        let mut c = UtilityConfig {
            family: spec.family(),
            alpha: spec.alpha().to_vec(),
            beta: None,
            agg: None,
            gamma: None,
            kink: None,
            exponent: None,
        };
        match spec {
            UtilitySpec::SumPlusAgg { beta, agg, .. } => {
                c.beta = Some(beta);
                c.agg = Some(agg);
            }
            UtilitySpec::SumExpPlusKink {
                gamma,
                kink,
                exponent,
                ..
            } => {
                c.gamma = Some(gamma);
                c.kink = Some(kink);
                c.exponent = Some(exponent);
            }
            _ => {}
        }
        c
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct SmoothnessTag {
    pub differentiable: bool,
    pub strictly_concave: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum AssumptionStatus {
    /// Guaranteed by the construction recipe the family is built from.
    ByConstruction,
    /// No domination witness is documented for this combination.
    Unverified,
}

/// Witness `(C, c, k)` for `u_j ⪯ Λ`: `Λ(t) >= C u_j(c t) + k` for `t <= 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DominationWitness {
    pub agent: usize,
    pub outer_scale: f64,
    pub inner_scale: f64,
    pub offset: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub family: Family,
    pub smoothness: SmoothnessTag,
    pub well_controlled: AssumptionStatus,
    pub integrability: AssumptionStatus,
    pub witnesses: Vec<DominationWitness>,
    /// Uniqueness of the primal optimum and of the equilibrium (needs differentiability).
    pub uniqueness_applies: bool,
    pub dual_uniqueness_guaranteed: bool,
    pub notes: Vec<String>,
}

impl UtilitySpec {
    pub fn exp_pairwise(alpha: Vec<f64>) -> Result<Self> {
        let s = UtilitySpec::ExpPairwise { alpha };
        s.validate()?;
        Ok(s)
    }

    pub fn sum_exp(alpha: Vec<f64>) -> Result<Self> {
        let s = UtilitySpec::SumExp { alpha };
        s.validate()?;
        Ok(s)
    }

    pub fn sum_plus_agg(alpha: Vec<f64>, beta: Vec<f64>, agg: Aggregator) -> Result<Self> {
        let s = UtilitySpec::SumPlusAgg { alpha, beta, agg };
        s.validate()?;
        Ok(s)
    }

    pub fn sum_exp_plus_kink(
        alpha: Vec<f64>,
        gamma: Vec<f64>,
        kink: Vec<f64>,
        exponent: f64,
    ) -> Result<Self> {
        let s = UtilitySpec::SumExpPlusKink {
            alpha,
            gamma,
            kink,
            exponent,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn family(&self) -> Family {
        match self {
            UtilitySpec::ExpPairwise { .. } => Family::ExpPairwise,
            UtilitySpec::SumExp { .. } => Family::SumExp,
            UtilitySpec::SumPlusAgg { .. } => Family::SumPlusAgg,
            UtilitySpec::SumExpPlusKink { .. } => Family::SumExpPlusKink,
        }
    }

    pub fn alpha(&self) -> &[f64] {
        match self {
            UtilitySpec::ExpPairwise { alpha }
            | UtilitySpec::SumExp { alpha }
            | UtilitySpec::SumPlusAgg { alpha, .. }
            | UtilitySpec::SumExpPlusKink { alpha, .. } => alpha,
        }
    }

    pub fn n(&self) -> usize {
        self.alpha().len()
    }

    pub fn smoothness(&self) -> SmoothnessTag {
        SmoothnessTag {
            differentiable: !matches!(self, UtilitySpec::SumExpPlusKink { .. }),
            strictly_concave: true,
        }
    }

    pub fn is_differentiable(&self) -> bool {
        self.smoothness().differentiable
    }

    /// Checks parameter ranges and reports which standing assumptions hold.
    pub fn validate(&self) -> Result<ValidationReport> {
        let alpha = self.alpha();
        if alpha.is_empty() {
            return Err(Error::Utility("alpha must have at least one entry".into()));
        }
        for (j, a) in alpha.iter().enumerate() {
            if !(a.is_finite() && *a > 0.0) {
                return Err(Error::Utility(format!(
                    "alpha_{} = {a} violates alpha_j > 0",
                    j + 1
                )));
            }
        }
        let n = alpha.len();
        let check_len = |name: &str, v: &[f64]| {
            if v.len() != n {
                Err(Error::Utility(format!(
                    "{name} has {} entries, alpha has {n}",
                    v.len()
                )))
            } else {
                Ok(())
            }
        };

        let mut witnesses = Vec::new();
        let mut notes = Vec::new();
        let mut integrability = AssumptionStatus::ByConstruction;
        match self {
            UtilitySpec::ExpPairwise { alpha } => {
                // Each cross term is Λ^k(t) = (1 - e^{-t})/2 on t = α_i x_i + α_j x_j,
                // and u_j(x) = (1 - e^{-2 α_j x})/2 matches it exactly at c = 1/(2 α_j).
                for (j, a) in alpha.iter().enumerate() {
                    witnesses.push(DominationWitness {
                        agent: j,
                        outer_scale: 1.0,
                        inner_scale: 1.0 / (2.0 * a),
                        offset: 0.0,
                    });
                }
            }
            UtilitySpec::SumExp { .. } => {
                notes.push("no aggregation term: the integrability condition is trivial".into());
            }
            UtilitySpec::SumPlusAgg { alpha, beta, agg } => {
                check_len("beta", beta)?;
                for (j, b) in beta.iter().enumerate() {
                    if !(b.is_finite() && *b >= 0.0) {
                        return Err(Error::Utility(format!(
                            "beta_{} = {b} violates beta_j >= 0",
                            j + 1
                        )));
                    }
                }
                if !beta.iter().any(|b| *b > 0.0) {
                    return Err(Error::Utility(
                        "aggregator weights violate max beta_j > 0".into(),
                    ));
                }
                agg.validate()?;
                for (j, a) in alpha.iter().enumerate() {
                    match aggregator_witness(*agg, *a) {
                        Some(offset) => witnesses.push(DominationWitness {
                            agent: j,
                            outer_scale: 1.0,
                            inner_scale: match agg {
                                Aggregator::Exponential { p } => p / a,
                                _ => 1.0,
                            },
                            offset,
                        }),
                        None => {
                            integrability = AssumptionStatus::Unverified;
                            notes.push(format!("no domination witness found for agent {}", j + 1));
                        }
                    }
                }
            }
            UtilitySpec::SumExpPlusKink {
                gamma,
                kink,
                exponent,
                ..
            } => {
                check_len("gamma", gamma)?;
                check_len("kink", kink)?;
                for (j, g) in gamma.iter().enumerate() {
                    if !(g.is_finite() && *g >= 0.0) {
                        return Err(Error::Utility(format!(
                            "gamma_{} = {g} violates gamma_j >= 0",
                            j + 1
                        )));
                    }
                }
                if let Some(k) = kink.iter().find(|k| !k.is_finite()) {
                    return Err(Error::Utility(format!("kink {k} is not finite")));
                }
                if !(exponent.is_finite() && *exponent >= 1.0) {
                    return Err(Error::Utility(format!(
                        "exponent a = {exponent} violates a >= 1"
                    )));
                }
                notes.push("non-differentiable: dual optimum may be non-unique".into());
            }
        }

        let smoothness = self.smoothness();
        Ok(ValidationReport {
            family: self.family(),
            smoothness,
            well_controlled: AssumptionStatus::ByConstruction,
            integrability,
            witnesses,
            uniqueness_applies: smoothness.differentiable,
            dual_uniqueness_guaranteed: smoothness.differentiable,
            notes,
        })
    }

    /// `sup_z U(z)`; `+inf` for families unbounded above.
    pub fn sup_value(&self) -> f64 {
        let n = self.n() as f64;
        match self {
            UtilitySpec::ExpPairwise { .. } => n * n / 2.0,
            UtilitySpec::SumExp { .. } | UtilitySpec::SumExpPlusKink { .. } => n,
            UtilitySpec::SumPlusAgg { agg, .. } => n + agg.sup(),
        }
    }

    /// `U(x)` together with an overflow flag; on overflow the value is `-inf`.
    pub fn evaluate_flagged(&self, x: &[f64]) -> (f64, bool) {
        debug_assert_eq!(x.len(), self.n());
        let alpha = self.alpha();
        let mut sum_u = 0.0;
        let mut sum_e = 0.0;
        for (a, xi) in alpha.iter().zip(x) {
            match neg_exp(*a, *xi) {
                Some(e) => {
                    sum_e += e;
                    sum_u += 1.0 - e;
                }
                None => return (f64::NEG_INFINITY, true),
            }
        }
        let value = match self {
            UtilitySpec::ExpPairwise { .. } => {
                let n = alpha.len() as f64;
                n * n / 2.0 - 0.5 * sum_e * sum_e
            }
            UtilitySpec::SumExp { .. } => sum_u,
            UtilitySpec::SumPlusAgg { beta, agg, .. } => match agg.value(weighted_sum(beta, x)) {
                Some(v) => sum_u + v,
                None => return (f64::NEG_INFINITY, true),
            },
            UtilitySpec::SumExpPlusKink {
                gamma,
                kink,
                exponent,
                ..
            } => sum_u - kink_gap(gamma, kink, x).powf(*exponent),
        };
        if value.is_finite() {
            (value, false)
        } else {
            (f64::NEG_INFINITY, true)
        }
    }

    pub fn evaluate(&self, x: &[f64]) -> f64 {
        self.evaluate_flagged(x).0
    }

    pub fn gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
        let alpha = self.alpha();
        let mut e = Vec::with_capacity(alpha.len());
        for (a, xi) in alpha.iter().zip(x) {
            e.push(neg_exp(*a, *xi).ok_or(Error::Overflow)?);
        }
        let mut g: Vec<f64> = alpha.iter().zip(&e).map(|(a, e)| a * e).collect();
        match self {
            UtilitySpec::ExpPairwise { .. } => {
                let s: f64 = e.iter().sum();
                g.iter_mut().for_each(|gj| *gj *= s);
            }
            UtilitySpec::SumExp { .. } => {}
            UtilitySpec::SumPlusAgg { beta, agg, .. } => {
                let d = agg.d1(weighted_sum(beta, x));
                for (gj, b) in g.iter_mut().zip(beta) {
                    if *b > 0.0 {
                        *gj += b * d;
                    }
                }
            }
            UtilitySpec::SumExpPlusKink {
                gamma,
                kink,
                exponent,
                ..
            } => {
                let gap = kink_gap(gamma, kink, x);
                for j in 0..x.len() {
                    if gamma[j] > 0.0 && x[j] == kink[j] && (*exponent == 1.0 || gap > 0.0) {
                        return Err(Error::NonDifferentiable);
                    }
                    if gamma[j] > 0.0 && x[j] < kink[j] {
                        g[j] += exponent * gap.powf(exponent - 1.0) * gamma[j];
                    }
                }
            }
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::Overflow);
        }
        Ok(g)
    }

    /// Gradient and Hessian in one pass (smooth families only).
    pub fn grad_hess(&self, x: &[f64]) -> Result<(Vec<f64>, DMatrix<f64>)> {
        let n = self.n();
        let alpha = self.alpha();
        let mut e = Vec::with_capacity(n);
        for (a, xi) in alpha.iter().zip(x) {
            e.push(neg_exp(*a, *xi).ok_or(Error::Overflow)?);
        }
        let mut h = DMatrix::zeros(n, n);
        let mut g = vec![0.0; n];
        match self {
            UtilitySpec::ExpPairwise { .. } => {
                let s: f64 = e.iter().sum();
                for i in 0..n {
                    let ai = alpha[i] * e[i];
                    g[i] = s * ai;
                    for j in 0..n {
                        h[(i, j)] = -ai * alpha[j] * e[j];
                    }
                    h[(i, i)] -= s * alpha[i] * ai;
                }
            }
            UtilitySpec::SumExp { .. } => {
                for i in 0..n {
                    g[i] = alpha[i] * e[i];
                    h[(i, i)] = -alpha[i] * alpha[i] * e[i];
                }
            }
            UtilitySpec::SumPlusAgg { beta, agg, .. } => {
                let t = weighted_sum(beta, x);
                let (d1, d2) = (agg.d1(t), agg.d2(t));
                for i in 0..n {
                    g[i] = alpha[i] * e[i] + if beta[i] > 0.0 { beta[i] * d1 } else { 0.0 };
                    for j in 0..n {
                        if beta[i] > 0.0 && beta[j] > 0.0 {
                            h[(i, j)] = d2 * beta[i] * beta[j];
                        }
                    }
                    h[(i, i)] -= alpha[i] * alpha[i] * e[i];
                }
            }
            UtilitySpec::SumExpPlusKink { .. } => return Err(Error::NonDifferentiable),
        }
        if g.iter().chain(h.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Overflow);
        }
        Ok((g, h))
    }

    /// Kink location of each coordinate that carries one (`gamma_j > 0`).
    pub fn kink_points(&self) -> Vec<Option<f64>> {
        match self {
            UtilitySpec::SumExpPlusKink { gamma, kink, .. } => gamma
                .iter()
                .zip(kink)
                .map(|(g, k)| (*g > 0.0).then_some(*k))
                .collect(),
            _ => vec![None; self.n()],
        }
    }

    /// Gradient and Hessian with respect to the coordinates not marked
    /// `fixed`; rows and columns of fixed coordinates are zero. Fixed
    /// coordinates may sit exactly on their kinks (or at `+inf`), which is
    /// where the kinked family is otherwise non-differentiable.
    pub fn grad_hess_partial(&self, x: &[f64], fixed: &[bool]) -> Result<(Vec<f64>, DMatrix<f64>)> {
        let UtilitySpec::SumExpPlusKink {
            alpha,
            gamma,
            kink,
            exponent,
        } = self
        else {
            let (mut g, mut h) = self.grad_hess(x)?;
            for (j, f) in fixed.iter().enumerate() {
                if *f {
                    g[j] = 0.0;
                    h.row_mut(j).fill(0.0);
                    h.column_mut(j).fill(0.0);
                }
            }
            return Ok((g, h));
        };
        let n = x.len();
        let gap = kink_gap(gamma, kink, x);
        let below: Vec<bool> = (0..n).map(|j| gamma[j] > 0.0 && x[j] < kink[j]).collect();
        let d1 = if gap > 0.0 {
            exponent * gap.powf(exponent - 1.0)
        } else {
            0.0
        };
        let d2 = if gap > 0.0 && *exponent > 1.0 {
            exponent * (exponent - 1.0) * gap.powf(exponent - 2.0)
        } else {
            0.0
        };
        let mut g = vec![0.0; n];
        let mut h = DMatrix::zeros(n, n);
        for i in (0..n).filter(|&i| !fixed[i]) {
            if gamma[i] > 0.0 && x[i] == kink[i] {
                return Err(Error::NonDifferentiable);
            }
            let e = neg_exp(alpha[i], x[i]).ok_or(Error::Overflow)?;
            g[i] = alpha[i] * e + if below[i] { d1 * gamma[i] } else { 0.0 };
            h[(i, i)] = -alpha[i] * alpha[i] * e;
            for j in (0..n).filter(|&j| !fixed[j]) {
                if below[i] && below[j] {
                    h[(i, j)] -= d2 * gamma[i] * gamma[j];
                }
            }
        }
        if g.iter().chain(h.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Overflow);
        }
        Ok((g, h))
    }

    pub fn hessian(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        self.grad_hess(x).map(|(_, h)| h)
    }

    /// Left and right partial derivatives along coordinate `j`.
    pub fn one_sided_partials(&self, x: &[f64], j: usize) -> (f64, f64) {
        self.slice(x, j).deriv(x[j])
    }

    /// `U` restricted to coordinate `j`, other coordinates frozen at `base`.
    pub fn slice(&self, base: &[f64], j: usize) -> CoordinateSlice {
        let alpha = self.alpha();
        let others_u = |skip: usize| -> f64 {
            let mut acc = 0.0;
            for (i, (a, xi)) in alpha.iter().zip(base).enumerate() {
                if i != skip {
                    acc += match neg_exp(*a, *xi) {
                        Some(e) => 1.0 - e,
                        None => return f64::NEG_INFINITY,
                    };
                }
            }
            acc
        };
        match self {
            UtilitySpec::ExpPairwise { alpha } => {
                let n = alpha.len() as f64;
                let rest = alpha
                    .iter()
                    .zip(base)
                    .enumerate()
                    .filter(|(i, _)| *i != j)
                    .map(|(_, (a, xi))| neg_exp(*a, *xi).unwrap_or(f64::INFINITY))
                    .sum();
                CoordinateSlice::Pairwise {
                    half_n2: n * n / 2.0,
                    alpha: alpha[j],
                    rest,
                }
            }
            UtilitySpec::SumExp { alpha } => CoordinateSlice::Exp {
                constant: others_u(j),
                alpha: alpha[j],
            },
            UtilitySpec::SumPlusAgg { alpha, beta, agg } => {
                let rest_t = beta
                    .iter()
                    .zip(base)
                    .enumerate()
                    .filter(|(i, (b, _))| *i != j && **b > 0.0)
                    .map(|(_, (b, xi))| b * xi)
                    .sum();
                CoordinateSlice::Agg {
                    constant: others_u(j),
                    alpha: alpha[j],
                    beta: beta[j],
                    rest_t,
                    agg: *agg,
                }
            }
            UtilitySpec::SumExpPlusKink {
                alpha,
                gamma,
                kink,
                exponent,
            } => {
                let rest_gap = (0..alpha.len())
                    .filter(|i| *i != j)
                    .map(|i| gamma[i] * neg_part(base[i] - kink[i]))
                    .sum();
                CoordinateSlice::Kink {
                    constant: others_u(j),
                    alpha: alpha[j],
                    gamma: gamma[j],
                    kink: kink[j],
                    rest_gap,
                    exponent: *exponent,
                }
            }
        }
    }

    /// The univariate summand `u_j` of a sum-of-univariate family.
    pub fn component_slice(&self, j: usize) -> Option<CoordinateSlice> {
        match self {
            UtilitySpec::SumExp { alpha } => Some(CoordinateSlice::Exp {
                constant: 0.0,
                alpha: alpha[j],
            }),
            _ => None,
        }
    }
}

#[inline]
fn neg_part(v: f64) -> f64 {
    if v < 0.0 {
        -v
    } else {
        0.0
    }
}

fn weighted_sum(beta: &[f64], x: &[f64]) -> f64 {
    beta.iter()
        .zip(x)
        .filter(|(b, _)| **b > 0.0)
        .map(|(b, xi)| b * xi)
        .sum()
}

fn kink_gap(gamma: &[f64], kink: &[f64], x: &[f64]) -> f64 {
    (0..x.len())
        .filter(|&j| gamma[j] > 0.0)
        .map(|j| gamma[j] * neg_part(x[j] - kink[j]))
        .sum()
}

/// Offset `k` with `u(t) >= (1 - e^{-alpha c t}) + k` on `t <= 0` for the
/// menu aggregator `u`.
fn aggregator_witness(agg: Aggregator, alpha: f64) -> Option<f64> {
    match agg {
        Aggregator::Exponential { .. } => Some(0.0),
        Aggregator::Rational { p } | Aggregator::Arctan { p } => {
            // With c = 1 the gap at t = -s is e^{alpha s} - (1+s)^p; find its minimum.
            let gap = |s: f64| (alpha * s).exp() - (1.0 + s).powf(p);
            let slope = |s: f64| alpha * (alpha * s).exp() - p * (1.0 + s).powf(p - 1.0);
            let mut hi = 1.0;
            while !(gap(hi) > 0.0 && slope(hi) > 0.0) {
                hi *= 2.0;
                if hi > 1e5 {
                    return None;
                }
            }
            let steps = 4096;
            let mut best = 0.0f64;
            for i in 0..=steps {
                best = best.min(gap(hi * i as f64 / steps as f64));
            }
            // grid resolution slack
            Some(best - 1e-6 * (1.0 + best.abs()))
        }
    }
}

/// A concave univariate restriction of `U` along one coordinate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CoordinateSlice {
    /// `N^2/2 - (rest + e^{-alpha y})^2 / 2`.
    Pairwise { half_n2: f64, alpha: f64, rest: f64 },
    /// `constant + 1 - e^{-alpha y}`.
    Exp { constant: f64, alpha: f64 },
    /// `constant + 1 - e^{-alpha y} + u(rest_t + beta y)`.
    Agg {
        constant: f64,
        alpha: f64,
        beta: f64,
        rest_t: f64,
        agg: Aggregator,
    },
    /// `constant + 1 - e^{-alpha y} - (rest_gap + gamma (y - kink)^-)^a`.
    Kink {
        constant: f64,
        alpha: f64,
        gamma: f64,
        kink: f64,
        rest_gap: f64,
        exponent: f64,
    },
}

impl CoordinateSlice {
    pub fn value(&self, y: f64) -> f64 {
        let v = match *self {
            CoordinateSlice::Pairwise {
                half_n2,
                alpha,
                rest,
            } => match neg_exp(alpha, y) {
                Some(e) => half_n2 - 0.5 * (rest + e) * (rest + e),
                None => f64::NEG_INFINITY,
            },
            CoordinateSlice::Exp { constant, alpha } => match neg_exp(alpha, y) {
                Some(e) => constant + 1.0 - e,
                None => f64::NEG_INFINITY,
            },
            CoordinateSlice::Agg {
                constant,
                alpha,
                beta,
                rest_t,
                agg,
            } => {
                let t = if beta > 0.0 {
                    rest_t + beta * y
                } else {
                    rest_t
                };
                match (neg_exp(alpha, y), agg.value(t)) {
                    (Some(e), Some(u)) => constant + 1.0 - e + u,
                    _ => f64::NEG_INFINITY,
                }
            }
            CoordinateSlice::Kink {
                constant,
                alpha,
                gamma,
                kink,
                rest_gap,
                exponent,
            } => match neg_exp(alpha, y) {
                Some(e) => {
                    constant + 1.0 - e - (rest_gap + gamma * neg_part(y - kink)).powf(exponent)
                }
                None => f64::NEG_INFINITY,
            },
        };
        if v.is_finite() {
            v
        } else {
            f64::NEG_INFINITY
        }
    }

    /// `(left, right)` derivatives; equal away from kinks.
    pub fn deriv(&self, y: f64) -> (f64, f64) {
        match *self {
            CoordinateSlice::Pairwise { alpha, rest, .. } => {
                let e = (-alpha * y).exp();
                let d = alpha * e * (rest + e);
                (d, d)
            }
            CoordinateSlice::Exp { alpha, .. } => {
                let d = alpha * (-alpha * y).exp();
                (d, d)
            }
            CoordinateSlice::Agg {
                alpha,
                beta,
                rest_t,
                agg,
                ..
            } => {
                let mut d = alpha * (-alpha * y).exp();
                if beta > 0.0 {
                    d += beta * agg.d1(rest_t + beta * y);
                }
                (d, d)
            }
            CoordinateSlice::Kink {
                alpha,
                gamma,
                kink,
                rest_gap,
                exponent,
                ..
            } => {
                let smooth = alpha * (-alpha * y).exp();
                if gamma == 0.0 || y > kink {
                    return (smooth, smooth);
                }
                let gap = rest_gap + gamma * neg_part(y - kink);
                let below = if exponent == 1.0 {
                    gamma
                } else {
                    exponent * gap.powf(exponent - 1.0) * gamma
                };
                if y < kink {
                    (smooth + below, smooth + below)
                } else {
                    (smooth + below, smooth)
                }
            }
        }
    }

    /// Second derivative, `None` at a kink.
    pub fn second(&self, y: f64) -> Option<f64> {
        match *self {
            CoordinateSlice::Pairwise { alpha, rest, .. } => {
                let e = (-alpha * y).exp();
                Some(-alpha * alpha * e * (rest + 2.0 * e))
            }
            CoordinateSlice::Exp { alpha, .. } => Some(-alpha * alpha * (-alpha * y).exp()),
            CoordinateSlice::Agg {
                alpha,
                beta,
                rest_t,
                agg,
                ..
            } => {
                let mut d = -alpha * alpha * (-alpha * y).exp();
                if beta > 0.0 {
                    d += beta * beta * agg.d2(rest_t + beta * y);
                }
                Some(d)
            }
            CoordinateSlice::Kink {
                alpha,
                gamma,
                kink,
                rest_gap,
                exponent,
                ..
            } => {
                let smooth = -alpha * alpha * (-alpha * y).exp();
                if gamma == 0.0 || y > kink {
                    return Some(smooth);
                }
                if y == kink {
                    return None;
                }
                let gap = rest_gap + gamma * (kink - y);
                if exponent == 1.0 {
                    Some(smooth)
                } else {
                    Some(
                        smooth
                            - exponent
                                * (exponent - 1.0)
                                * gap.powf(exponent - 2.0)
                                * gamma
                                * gamma,
                    )
                }
            }
        }
    }
}
