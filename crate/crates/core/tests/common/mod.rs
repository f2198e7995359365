#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use rug::Float;

pub const PREC: u32 = 256;

pub fn mp(x: f64) -> Float {
    Float::with_val(PREC, x)
}

pub fn mp_digamma(x: f64) -> Float {
    mp(x).digamma()
}

pub fn mp_ln(x: f64) -> Float {
    mp(x).ln()
}

pub fn mp_ln_2pi() -> Float {
    (Float::with_val(PREC, rug::float::Constant::Pi) * 2u32).ln()
}

pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// `α ~ Gamma(a, rate b)`, then `μ ~ N(m, 1/(s α))`.
pub fn sample_normal_gamma(rng: &mut ChaCha8Rng, m: f64, s: f64, a: f64, b: f64) -> (f64, f64) {
    let alpha = Gamma::new(a, 1.0 / b).unwrap().sample(rng);
    let mu = m + normal(rng) / (s * alpha).sqrt();
    (mu, alpha)
}

pub fn sample_dirichlet(rng: &mut ChaCha8Rng, c: &[f64]) -> Vec<f64> {
    let g: Vec<f64> = c
        .iter()
        .map(|&ck| Gamma::new(ck, 1.0).unwrap().sample(rng))
        .collect();
    let total: f64 = g.iter().sum();
    g.into_iter().map(|v| v / total).collect()
}

/// Running mean and standard error of the mean.
#[derive(Default, Clone, Copy)]
pub struct MeanSe {
    n: f64,
    mean: f64,
    m2: f64,
}

impl MeanSe {
    pub fn push(&mut self, x: f64) {
        self.n += 1.0;
        let d = x - self.mean;
        self.mean += d / self.n;
        self.m2 += d * (x - self.mean);
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn se(&self) -> f64 {
        (self.m2 / (self.n - 1.0) / self.n).sqrt()
    }

    /// `|mean − target|` in standard errors.
    pub fn z(&self, target: f64) -> f64 {
        let diff = (self.mean - target).abs();
        if diff == 0.0 {
            return 0.0;
        }
        diff / self.se()
    }
}

/// Asymptotic two-sample Kolmogorov–Smirnov test; returns `(D, p)`.
pub fn ks_two_sample(mut x: Vec<f64>, mut y: Vec<f64>) -> (f64, f64) {
    x.sort_by(f64::total_cmp);
    y.sort_by(f64::total_cmp);
    let (n, m) = (x.len() as f64, y.len() as f64);
    let (mut i, mut j, mut d) = (0usize, 0usize, 0.0f64);
    while i < x.len() && j < y.len() {
        let v = x[i].min(y[j]);
        while i < x.len() && x[i] <= v {
            i += 1;
        }
        while j < y.len() && y[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / n - j as f64 / m).abs());
    }
    let en = (n * m / (n + m)).sqrt();
    let lambda = (en + 0.12 + 0.11 / en) * d;
    (d, kolmogorov_survival(lambda))
}

/// `Q(λ) = 2 Σ_{k≥1} (−1)^{k−1} exp(−2 k² λ²)`.
pub fn kolmogorov_survival(lambda: f64) -> f64 {
    if lambda < 0.2 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..200 {
        let k = k as f64;
        let term = (-2.0 * k * k * lambda * lambda).exp();
        sum += if k as u64 % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

pub fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    rng.random_range(lo..hi)
}

pub fn ln_gamma(x: f64) -> f64 {
    mp(x).ln_gamma().to_f64()
}

/// Joint log density of one Normal-Gamma coordinate, `N(μ; m, 1/(sα)) Gamma(α; a, rate b)`.
#[derive(Clone, Copy)]
pub struct NgDensity {
    m: f64,
    s: f64,
    a: f64,
    b: f64,
    norm: f64,
}

impl NgDensity {
    pub fn new(m: f64, s: f64, a: f64, b: f64) -> Self {
        let norm = 0.5 * (s / (2.0 * std::f64::consts::PI)).ln() + a * b.ln() - ln_gamma(a);
        Self { m, s, a, b, norm }
    }

    pub fn ln_pdf(&self, mu: f64, alpha: f64) -> f64 {
        let r = mu - self.m;
        self.norm + (self.a - 0.5) * alpha.ln() - 0.5 * self.s * alpha * r * r - self.b * alpha
    }
}

pub struct DirichletDensity {
    c: Vec<f64>,
    norm: f64,
}

impl DirichletDensity {
    pub fn new(c: &[f64]) -> Self {
        let norm = ln_gamma(c.iter().sum()) - c.iter().map(|&ck| ln_gamma(ck)).sum::<f64>();
        Self {
            c: c.to_vec(),
            norm,
        }
    }

    pub fn ln_pdf(&self, pi: &[f64]) -> f64 {
        self.norm
            + pi.iter()
                .zip(&self.c)
                .map(|(&p, &ck)| (ck - 1.0) * p.ln())
                .sum::<f64>()
    }
}

/// Random Normal-Gamma coordinate `(m, s, a, b)` in a moderate range.
pub fn random_ng_coord(rng: &mut ChaCha8Rng) -> (f64, f64, f64, f64) {
    (
        uniform(rng, -3.0, 3.0),
        uniform(rng, 0.2, 5.0),
        uniform(rng, 0.5, 10.0),
        uniform(rng, 0.2, 5.0),
    )
}

pub fn random_ng_factor(rng: &mut ChaCha8Rng, dim: usize) -> fmx_core::expfam::NormalGammaFactor {
    let coords: Vec<_> = (0..dim).map(|_| random_ng_coord(rng)).collect();
    fmx_core::expfam::NormalGammaFactor::new(
        coords.iter().map(|c| c.0).collect(),
        coords.iter().map(|c| c.1).collect(),
        coords.iter().map(|c| c.2).collect(),
        coords.iter().map(|c| c.3).collect(),
    )
    .unwrap()
}

pub fn random_counts(rng: &mut ChaCha8Rng, k: usize) -> Vec<f64> {
    (0..k).map(|_| uniform(rng, 0.5, 8.0)).collect()
}

/// One Monte-Carlo comparison: label, closed-form value, estimator.
pub struct McCheck {
    pub label: String,
    pub exact: f64,
    pub est: MeanSe,
}

impl McCheck {
    pub fn z(&self) -> f64 {
        self.est.z(self.exact)
    }
}

/// Checks moments of `q` and `KL(q‖p)` against `draws` samples from `q`.
pub fn ng_mc_checks(
    rng: &mut ChaCha8Rng,
    q: &fmx_core::expfam::NormalGammaFactor,
    p: &fmx_core::expfam::NormalGammaFactor,
    draws: usize,
) -> Vec<McCheck> {
    let dim = q.dim();
    let dens: Vec<(NgDensity, NgDensity)> = (0..dim)
        .map(|d| {
            (
                NgDensity::new(q.m()[d], q.s()[d], q.a()[d], q.b()[d]),
                NgDensity::new(p.m()[d], p.s()[d], p.a()[d], p.b()[d]),
            )
        })
        .collect();
    let mut moments = vec![[MeanSe::default(); 4]; dim];
    let mut kl = MeanSe::default();
    for _ in 0..draws {
        let mut log_ratio = 0.0;
        for d in 0..dim {
            let (m, s, a, b) = (q.m()[d], q.s()[d], q.a()[d], q.b()[d]);
            let (mu, alpha) = sample_normal_gamma(rng, m, s, a, b);
            let acc = &mut moments[d];
            acc[0].push(alpha.ln());
            acc[1].push(alpha);
            acc[2].push(alpha * mu);
            acc[3].push(alpha * mu * mu);
            log_ratio += dens[d].0.ln_pdf(mu, alpha) - dens[d].1.ln_pdf(mu, alpha);
        }
        kl.push(log_ratio);
    }
    let exact = q.moments();
    let mut out = Vec::new();
    for (d, acc) in moments.into_iter().enumerate() {
        let values = [
            exact.e_log_alpha[d],
            exact.e_alpha[d],
            exact.e_alpha_mu[d],
            exact.e_alpha_mu_sq[d],
        ];
        for (j, name) in ["E[log a]", "E[a]", "E[a mu]", "E[a mu^2]"]
            .iter()
            .enumerate()
        {
            out.push(McCheck {
                label: format!("{name} d={d}"),
                exact: values[j],
                est: acc[j],
            });
        }
    }
    out.push(McCheck {
        label: "ng_kl".into(),
        exact: fmx_core::expfam::ng_kl(q, p).unwrap(),
        est: kl,
    });
    out
}

/// Checks `E[log π]` of `q` and `KL(q‖p)` against `draws` Dirichlet samples.
pub fn dirichlet_mc_checks(
    rng: &mut ChaCha8Rng,
    cq: &[f64],
    cp: &[f64],
    draws: usize,
) -> Vec<McCheck> {
    use fmx_core::expfam::{dirichlet_elog_pi, dirichlet_kl, DirichletFactor};
    let (dq, dp) = (DirichletDensity::new(cq), DirichletDensity::new(cp));
    let mut elog = vec![MeanSe::default(); cq.len()];
    let mut kl = MeanSe::default();
    for _ in 0..draws {
        let pi = sample_dirichlet(rng, cq);
        for (acc, p) in elog.iter_mut().zip(&pi) {
            acc.push(p.ln());
        }
        kl.push(dq.ln_pdf(&pi) - dp.ln_pdf(&pi));
    }
    let q = DirichletFactor::new(cq.to_vec()).unwrap();
    let p = DirichletFactor::new(cp.to_vec()).unwrap();
    let exact = dirichlet_elog_pi(&q);
    let mut out: Vec<McCheck> = elog
        .into_iter()
        .enumerate()
        .map(|(k, est)| McCheck {
            label: format!("E[log pi_{k}]"),
            exact: exact[k],
            est,
        })
        .collect();
    out.push(McCheck {
        label: "dirichlet_kl".into(),
        exact: dirichlet_kl(&q, &p).unwrap(),
        est: kl,
    });
    out
}

pub mod grad;
pub mod prior_oracle;
pub mod runs;
pub mod vanilla;
