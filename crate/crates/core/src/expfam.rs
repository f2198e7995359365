//! Normal-Gamma and Dirichlet factors: moments, mean/natural parameter maps and KL divergences.
//!
//! A Normal-Gamma factor over `(μ, α)` is `N(μ; m, (s α)^-1) · Gamma(α; a, b)` with `b` a rate,
//! stored dimension-wise. Factors are validated once at construction.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, FmxError, Result};
use crate::special::{digamma, ln_gamma};

/// Round-off tolerance below zero that is still reported as a KL of exactly zero.
pub const KL_FLOOR_TOLERANCE: f64 = 1e-10;

pub(crate) fn floor_kl(value: f64) -> f64 {
    if (-KL_FLOOR_TOLERANCE..0.0).contains(&value) {
        0.0
    } else {
        value
    }
}

fn check_positive(name: &str, values: &[f64]) -> Result<()> {
    for (d, &v) in values.iter().enumerate() {
        if !(v > 0.0) || !v.is_finite() {
            return Err(FmxError::Domain(format!(
                "{name}[{d}] must be finite and > 0, got {v}"
            )));
        }
    }
    Ok(())
}

fn check_finite(name: &str, values: &[f64]) -> Result<()> {
    for (d, &v) in values.iter().enumerate() {
        if !v.is_finite() {
            return Err(FmxError::Domain(format!("{name}[{d}] is not finite: {v}")));
        }
    }
    Ok(())
}

/// Diagonal Normal-Gamma factor in mean parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalGammaFactor {
    m: Vec<f64>,
    s: Vec<f64>,
    a: Vec<f64>,
    b: Vec<f64>,
}

impl NormalGammaFactor {
    pub fn new(m: Vec<f64>, s: Vec<f64>, a: Vec<f64>, b: Vec<f64>) -> Result<Self> {
        let dim = m.len();
        check_len("normal-gamma s", dim, s.len())?;
        check_len("normal-gamma a", dim, a.len())?;
        check_len("normal-gamma b", dim, b.len())?;
        if dim == 0 {
            return Err(FmxError::Domain("normal-gamma factor needs D >= 1".into()));
        }
        check_finite("m", &m)?;
        check_positive("s", &s)?;
        check_positive("a", &a)?;
        check_positive("b", &b)?;
        Ok(Self { m, s, a, b })
    }

    /// Same `(m, s, a, b)` in every one of `dim` dimensions.
    pub fn broadcast(dim: usize, m: f64, s: f64, a: f64, b: f64) -> Result<Self> {
        Self::new(vec![m; dim], vec![s; dim], vec![a; dim], vec![b; dim])
    }

    pub fn dim(&self) -> usize {
        self.m.len()
    }

    pub fn m(&self) -> &[f64] {
        &self.m
    }

    pub fn s(&self) -> &[f64] {
        &self.s
    }

    pub fn a(&self) -> &[f64] {
        &self.a
    }

    pub fn b(&self) -> &[f64] {
        &self.b
    }

    pub fn to_natural(&self) -> NaturalNGParams {
        let dim = self.dim();
        let mut out = NaturalNGParams {
            l1: Vec::with_capacity(dim),
            l2: Vec::with_capacity(dim),
            l3: Vec::with_capacity(dim),
            l4: Vec::with_capacity(dim),
        };
        for d in 0..dim {
            let (m, s, a, b) = (self.m[d], self.s[d], self.a[d], self.b[d]);
            out.l1.push(a - 0.5);
            out.l2.push(-(b + 0.5 * s * m * m));
            out.l3.push(s * m);
            out.l4.push(-0.5 * s);
        }
        out
    }

    pub fn moments(&self) -> NgMoments {
        let dim = self.dim();
        let mut out = NgMoments {
            e_log_alpha: Vec::with_capacity(dim),
            e_alpha: Vec::with_capacity(dim),
            e_alpha_mu: Vec::with_capacity(dim),
            e_alpha_mu_sq: Vec::with_capacity(dim),
        };
        for d in 0..dim {
            let (m, s, a, b) = (self.m[d], self.s[d], self.a[d], self.b[d]);
            let e_alpha = a / b;
            out.e_log_alpha.push(digamma(a) - b.ln());
            out.e_alpha.push(e_alpha);
            out.e_alpha_mu.push(m * e_alpha);
            out.e_alpha_mu_sq.push(1.0 / s + m * m * e_alpha);
        }
        out
    }
}

/// Expected sufficient statistics `E[log α], E[α], E[αμ], E[αμ²]`, one entry per dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct NgMoments {
    pub e_log_alpha: Vec<f64>,
    pub e_alpha: Vec<f64>,
    pub e_alpha_mu: Vec<f64>,
    pub e_alpha_mu_sq: Vec<f64>,
}

/// Natural parameters paired with the sufficient statistics `(log α, α, αμ, αμ²)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NaturalNGParams {
    pub l1: Vec<f64>,
    pub l2: Vec<f64>,
    pub l3: Vec<f64>,
    pub l4: Vec<f64>,
}

impl NaturalNGParams {
    pub fn dim(&self) -> usize {
        self.l1.len()
    }

    /// Checks the open region on which the natural parameters map to a valid factor.
    pub fn validate(&self) -> Result<()> {
        let dim = self.dim();
        check_len("natural l2", dim, self.l2.len())?;
        check_len("natural l3", dim, self.l3.len())?;
        check_len("natural l4", dim, self.l4.len())?;
        for d in 0..dim {
            let (l1, l2, l3, l4) = (self.l1[d], self.l2[d], self.l3[d], self.l4[d]);
            if !(l1.is_finite() && l2.is_finite() && l3.is_finite() && l4.is_finite()) {
                return Err(FmxError::Domain(format!(
                    "non-finite natural parameter at d={d}"
                )));
            }
            if !(l4 < 0.0) {
                return Err(FmxError::Domain(format!("l4[{d}] = {l4} must be < 0")));
            }
            if !(l1 > -0.5) {
                return Err(FmxError::Domain(format!("l1[{d}] = {l1} must be > -1/2")));
            }
            if !(l2 < l3 * l3 / (4.0 * l4)) {
                return Err(FmxError::Domain(format!(
                    "l2[{d}] = {l2} implies a non-positive Gamma rate"
                )));
            }
        }
        Ok(())
    }

    pub fn to_mean(&self) -> Result<NormalGammaFactor> {
        self.validate()?;
        let dim = self.dim();
        let (mut m, mut s, mut a, mut b) = (
            Vec::with_capacity(dim),
            Vec::with_capacity(dim),
            Vec::with_capacity(dim),
            Vec::with_capacity(dim),
        );
        for d in 0..dim {
            let sd = -2.0 * self.l4[d];
            let md = self.l3[d] / sd;
            s.push(sd);
            m.push(md);
            a.push(self.l1[d] + 0.5);
            b.push(-self.l2[d] - 0.5 * sd * md * md);
        }
        NormalGammaFactor::new(m, s, a, b)
    }

    /// `(1 - rho) * self + rho * target`, elementwise.
    pub fn convex_step(&self, target: &NaturalNGParams, rho: f64) -> NaturalNGParams {
        let mix = |x: &[f64], y: &[f64]| -> Vec<f64> {
            x.iter()
                .zip(y)
                .map(|(&u, &v)| (1.0 - rho) * u + rho * v)
                .collect()
        };
        NaturalNGParams {
            l1: mix(&self.l1, &target.l1),
            l2: mix(&self.l2, &target.l2),
            l3: mix(&self.l3, &target.l3),
            l4: mix(&self.l4, &target.l4),
        }
    }
}

/// Mean-to-natural map of a Normal-Gamma factor.
pub fn mean_to_natural(f: &NormalGammaFactor) -> NaturalNGParams {
    f.to_natural()
}

/// Natural-to-mean map; fails if the implied `s`, `a` or `b` is not positive.
pub fn natural_to_mean(p: &NaturalNGParams) -> Result<NormalGammaFactor> {
    p.to_mean()
}

/// One-dimensional Normal-Gamma KL(q || p).
#[allow(clippy::too_many_arguments)]
pub(crate) fn ng_kl_scalar(
    (mq, sq, aq, bq): (f64, f64, f64, f64),
    (m0, s0, a0, b0): (f64, f64, f64, f64),
) -> f64 {
    let dm = mq - m0;
    let gauss = 0.5 * (s0 * (aq / bq) * dm * dm + s0 / sq - (s0.ln() - sq.ln()) - 1.0);
    let gamma = a0 * (bq / b0).ln() - (ln_gamma(aq) - ln_gamma(a0)) + (aq - a0) * digamma(aq)
        - (bq - b0) * aq / bq;
    gauss + gamma
}

/// KL(q || p) between two Normal-Gamma factors, summed over dimensions.
pub fn ng_kl(q: &NormalGammaFactor, p: &NormalGammaFactor) -> Result<f64> {
    check_len("normal-gamma KL dimension", q.dim(), p.dim())?;
    let total: f64 = (0..q.dim())
        .map(|d| {
            ng_kl_scalar(
                (q.m[d], q.s[d], q.a[d], q.b[d]),
                (p.m[d], p.s[d], p.a[d], p.b[d]),
            )
        })
        .sum();
    Ok(floor_kl(total))
}

/// Dirichlet factor over mixing weights, stored as pseudo-counts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirichletFactor {
    c: Vec<f64>,
}

impl DirichletFactor {
    pub fn new(c: Vec<f64>) -> Result<Self> {
        if c.is_empty() {
            return Err(FmxError::Domain("Dirichlet factor needs K >= 1".into()));
        }
        check_positive("c", &c)?;
        Ok(Self { c })
    }

    pub fn symmetric(k: usize, c0: f64) -> Result<Self> {
        Self::new(vec![c0; k])
    }

    pub fn len(&self) -> usize {
        self.c.len()
    }

    pub fn is_empty(&self) -> bool {
        self.c.is_empty()
    }

    pub fn counts(&self) -> &[f64] {
        &self.c
    }

    /// `E[log π_k] = ψ(c_k) - ψ(Σ c)`.
    pub fn elog_pi(&self) -> Vec<f64> {
        let psi_total = digamma(self.c.iter().sum());
        self.c.iter().map(|&ck| digamma(ck) - psi_total).collect()
    }
}

pub fn dirichlet_elog_pi(f: &DirichletFactor) -> Vec<f64> {
    f.elog_pi()
}

/// KL(q || p) between Dirichlet distributions of equal length.
pub fn dirichlet_kl(q: &DirichletFactor, p: &DirichletFactor) -> Result<f64> {
    check_len("Dirichlet KL length", q.len(), p.len())?;
    let sum_q: f64 = q.c.iter().sum();
    let sum_p: f64 = p.c.iter().sum();
    let psi_sum_q = digamma(sum_q);
    let mut kl = ln_gamma(sum_q) - ln_gamma(sum_p);
    for (&cq, &cp) in q.c.iter().zip(&p.c) {
        kl += ln_gamma(cp) - ln_gamma(cq) + (cq - cp) * (digamma(cq) - psi_sum_q);
    }
    Ok(floor_kl(kl))
}
