//! The factorial mixture prior and its variational posterior `q(ξ)`.
//!
//! The latent vector `z ∈ R^{D·I}` is split into `I` blocks of `D` entries; block `i` occupies
//! indices `i·D .. (i+1)·D` and has its own Gaussian mixture with `K_i` components. Each
//! component carries a diagonal Normal-Gamma posterior over its mean and precision, each block a
//! Dirichlet posterior over its mixing weights.

use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::codec::{ByteReader, ByteWriter};
use crate::error::{check_len, FmxError, Result};
use crate::expfam::{
    dirichlet_kl, floor_kl, ng_kl, DirichletFactor, NaturalNGParams, NormalGammaFactor,
};
use crate::special::digamma;

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Bounds applied to encoder log-variances before exponentiation.
pub const LOG_VAR_MIN: f64 = -30.0;
pub const LOG_VAR_MAX: f64 = 30.0;

const PRIOR_CODEC_VERSION: u16 = 1;

/// Amortized Gaussian posterior `q(z | x)` emitted by the encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderOutput {
    mu: Vec<f64>,
    log_var: Vec<f64>,
}

impl EncoderOutput {
    pub fn new(mu: Vec<f64>, log_var: Vec<f64>) -> Result<Self> {
        check_len("encoder log_var", mu.len(), log_var.len())?;
        if let Some(j) = mu.iter().chain(log_var.iter()).position(|v| !v.is_finite()) {
            return Err(FmxError::Numeric(format!(
                "encoder output entry {j} is not finite"
            )));
        }
        Ok(Self { mu, log_var })
    }

    /// Splits a raw `2·D·I` network output into means (first half) and log-variances.
    pub fn from_raw(raw: &[f64]) -> Result<Self> {
        if !raw.len().is_multiple_of(2) {
            return Err(FmxError::Shape {
                what: "encoder raw output (must be even)",
                expected: raw.len() + 1,
                actual: raw.len(),
            });
        }
        let half = raw.len() / 2;
        Self::new(raw[..half].to_vec(), raw[half..].to_vec())
    }

    pub fn len(&self) -> usize {
        self.mu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.is_empty()
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn log_var(&self) -> &[f64] {
        &self.log_var
    }

    pub fn clamped_log_var(&self, j: usize) -> f64 {
        self.log_var[j].clamp(LOG_VAR_MIN, LOG_VAR_MAX)
    }

    pub fn variance(&self, j: usize) -> f64 {
        self.clamped_log_var(j).exp()
    }

    /// Whether the log-variance at `j` is inside the clamp window (so it carries gradient).
    pub fn log_var_active(&self, j: usize) -> bool {
        (LOG_VAR_MIN..=LOG_VAR_MAX).contains(&self.log_var[j])
    }
}

/// Per-block soft assignments `γ_i`, each a probability vector of length `K_i`.
#[derive(Clone, Debug, PartialEq)]
pub struct Responsibilities {
    gamma: Vec<Vec<f64>>,
}

impl Responsibilities {
    pub fn new(gamma: Vec<Vec<f64>>) -> Result<Self> {
        for (i, g) in gamma.iter().enumerate() {
            if g.is_empty() || g.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
                return Err(FmxError::Domain(format!(
                    "responsibilities for block {i} must be nonnegative and finite"
                )));
            }
            let total: f64 = g.iter().sum();
            if (total - 1.0).abs() > 1e-9 {
                return Err(FmxError::Domain(format!(
                    "responsibilities for block {i} sum to {total}"
                )));
            }
        }
        Ok(Self { gamma })
    }

    pub fn blocks(&self) -> usize {
        self.gamma.len()
    }

    pub fn block(&self, i: usize) -> &[f64] {
        &self.gamma[i]
    }

    /// Replaces block `i` by a fixed probability vector (a clamped label).
    pub fn clamp_block(&mut self, i: usize, one_hot: &[f64]) -> Result<()> {
        check_len("clamped label", self.gamma[i].len(), one_hot.len())?;
        self.gamma[i].copy_from_slice(one_hot);
        Ok(())
    }

    pub fn argmax(&self) -> Vec<usize> {
        self.gamma
            .iter()
            .map(|g| {
                g.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (k, &v)| {
                        if v > best.1 {
                            (k, v)
                        } else {
                            best
                        }
                    })
                    .0
            })
            .collect()
    }
}

/// A product-quantized code: one component index per block (0-based).
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct LatentCode {
    pub k: Vec<usize>,
}

/// Hyperprior over every component (Normal-Gamma) and every mixing vector (symmetric Dirichlet).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hyperprior {
    pub m0: f64,
    pub s0: f64,
    pub a0: f64,
    pub b0: f64,
    pub c0: f64,
}

impl Default for Hyperprior {
    fn default() -> Self {
        Self {
            m0: 0.0,
            s0: 1.0,
            a0: 0.01,
            b0: 0.01,
            c0: 1.0,
        }
    }
}

impl Hyperprior {
    pub fn validate(&self) -> Result<()> {
        if !self.m0.is_finite() {
            return Err(FmxError::Domain(format!(
                "m0 must be finite, got {}",
                self.m0
            )));
        }
        for (name, v) in [
            ("s0", self.s0),
            ("a0", self.a0),
            ("b0", self.b0),
            ("c0", self.c0),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(FmxError::Domain(format!("{name} must be > 0, got {v}")));
            }
        }
        Ok(())
    }

    pub fn normal_gamma(&self, dim: usize) -> Result<NormalGammaFactor> {
        NormalGammaFactor::broadcast(dim, self.m0, self.s0, self.a0, self.b0)
    }

    pub fn dirichlet(&self, k: usize) -> Result<DirichletFactor> {
        DirichletFactor::symmetric(k, self.c0)
    }
}

#[derive(Clone, Debug, PartialEq)]
struct ComponentCache {
    /// `½ Σ_d [ψ(a) − ln b − ln 2π − 1/s]`
    log_norm: f64,
    /// `E[α] = a / b` per dimension.
    precision: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
struct BlockCache {
    elog_pi: Vec<f64>,
    components: Vec<ComponentCache>,
}

/// All `q(ξ)` factors across blocks and components, plus the hyperprior.
#[derive(Clone, Debug, PartialEq)]
pub struct FactorialPriorState {
    dim: usize,
    components: Vec<Vec<NormalGammaFactor>>,
    mixings: Vec<DirichletFactor>,
    hyper: Hyperprior,
    cache: Vec<BlockCache>,
}

/// Gradient of an objective with respect to the log-transformed mean parameters of `q(ξ)`.
///
/// Component entries are laid out `[i][k·D + d]`; pseudo-count entries `[i][k]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PriorGradient {
    pub m: Vec<Vec<f64>>,
    pub log_s: Vec<Vec<f64>>,
    pub log_a: Vec<Vec<f64>>,
    pub log_b: Vec<Vec<f64>>,
    pub log_c: Vec<Vec<f64>>,
}

impl PriorGradient {
    pub fn zeros(state: &FactorialPriorState) -> Self {
        let comp: Vec<Vec<f64>> = state
            .ks()
            .iter()
            .map(|&k| vec![0.0; k * state.dim])
            .collect();
        Self {
            m: comp.clone(),
            log_s: comp.clone(),
            log_a: comp.clone(),
            log_b: comp,
            log_c: state.ks().iter().map(|&k| vec![0.0; k]).collect(),
        }
    }

    pub fn add(&mut self, other: &PriorGradient) {
        let add = |x: &mut Vec<Vec<f64>>, y: &Vec<Vec<f64>>| {
            for (u, v) in x.iter_mut().zip(y) {
                for (p, q) in u.iter_mut().zip(v) {
                    *p += q;
                }
            }
        };
        add(&mut self.m, &other.m);
        add(&mut self.log_s, &other.log_s);
        add(&mut self.log_a, &other.log_a);
        add(&mut self.log_b, &other.log_b);
        add(&mut self.log_c, &other.log_c);
    }
}

impl FactorialPriorState {
    /// Assembles a state from explicit factors; `components[i]` has `K_i` factors of length `dim`.
    pub fn from_parts(
        dim: usize,
        components: Vec<Vec<NormalGammaFactor>>,
        mixings: Vec<DirichletFactor>,
        hyper: Hyperprior,
    ) -> Result<Self> {
        hyper.validate()?;
        if dim == 0 || components.is_empty() {
            return Err(FmxError::Config("prior needs D >= 1 and I >= 1".into()));
        }
        check_len("mixing factors per block", components.len(), mixings.len())?;
        for (i, (comps, mix)) in components.iter().zip(&mixings).enumerate() {
            if comps.is_empty() {
                return Err(FmxError::Config(format!("block {i} has no components")));
            }
            check_len("Dirichlet length", comps.len(), mix.len())?;
            for c in comps {
                check_len("component dimension", dim, c.dim())?;
            }
        }
        let cache = build_cache(&components, &mixings);
        Ok(Self {
            dim,
            components,
            mixings,
            hyper,
            cache,
        })
    }

    /// Hyperprior-valued factors whose means are jittered by `N(0, jitter²)` per dimension.
    pub fn initialize<R: Rng + ?Sized>(
        dim: usize,
        ks: &[usize],
        hyper: Hyperprior,
        jitter: f64,
        rng: &mut R,
    ) -> Result<Self> {
        hyper.validate()?;
        let mut components = Vec::with_capacity(ks.len());
        let mut mixings = Vec::with_capacity(ks.len());
        for &k in ks {
            let mut block = Vec::with_capacity(k);
            for _ in 0..k {
                let m: Vec<f64> = (0..dim)
                    .map(|_| {
                        let e: f64 = StandardNormal.sample(rng);
                        hyper.m0 + jitter * e
                    })
                    .collect();
                block.push(NormalGammaFactor::new(
                    m,
                    vec![hyper.s0; dim],
                    vec![hyper.a0; dim],
                    vec![hyper.b0; dim],
                )?);
            }
            components.push(block);
            mixings.push(hyper.dirichlet(k)?);
        }
        Self::from_parts(dim, components, mixings, hyper)
    }

    pub fn blocks(&self) -> usize {
        self.components.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn latent_dim(&self) -> usize {
        self.dim * self.blocks()
    }

    pub fn ks(&self) -> Vec<usize> {
        self.components.iter().map(Vec::len).collect()
    }

    pub fn hyper(&self) -> &Hyperprior {
        &self.hyper
    }

    pub fn component(&self, i: usize, k: usize) -> &NormalGammaFactor {
        &self.components[i][k]
    }

    pub fn mixing(&self, i: usize) -> &DirichletFactor {
        &self.mixings[i]
    }

    /// `E[α]` per dimension of component `(i, k)`.
    pub fn expected_precision(&self, i: usize, k: usize) -> &[f64] {
        &self.cache[i].components[k].precision
    }

    /// `E[log π_i]` for block `i`.
    pub fn elog_pi(&self, i: usize) -> &[f64] {
        &self.cache[i].elog_pi
    }

    fn check_block(&self, i: usize) -> Result<()> {
        if i >= self.blocks() {
            return Err(FmxError::Index {
                what: "block",
                index: i,
                limit: self.blocks(),
            });
        }
        Ok(())
    }

    fn check_component(&self, i: usize, k: usize) -> Result<()> {
        self.check_block(i)?;
        if k >= self.components[i].len() {
            return Err(FmxError::Index {
                what: "component",
                index: k,
                limit: self.components[i].len(),
            });
        }
        Ok(())
    }

    fn check_encoding(&self, enc: &EncoderOutput) -> Result<()> {
        check_len("encoder output length", self.latent_dim(), enc.len())
    }

    /// `E_{q(z_i|x) q(μ,α)}[log N(z_i; μ_ik, α_ik^-1)]`.
    pub fn expected_log_gauss(&self, enc: &EncoderOutput, i: usize, k: usize) -> Result<f64> {
        self.check_component(i, k)?;
        self.check_encoding(enc)?;
        Ok(self.elog_gauss_unchecked(enc, i, k))
    }

    pub(crate) fn elog_gauss_unchecked(&self, enc: &EncoderOutput, i: usize, k: usize) -> f64 {
        let comp = &self.components[i][k];
        let cache = &self.cache[i].components[k];
        let offset = i * self.dim;
        let mut quad = 0.0;
        for d in 0..self.dim {
            let j = offset + d;
            let diff = enc.mu[j] - comp.m()[d];
            quad += cache.precision[d] * (diff * diff + enc.variance(j));
        }
        cache.log_norm - 0.5 * quad
    }

    /// Unnormalized log-responsibilities of block `i`: `E[log N] + E[log π]` for every component.
    pub fn log_scores(&self, enc: &EncoderOutput, i: usize) -> Result<Vec<f64>> {
        self.check_block(i)?;
        self.check_encoding(enc)?;
        Ok(self.log_scores_unchecked(enc, i))
    }

    pub(crate) fn log_scores_unchecked(&self, enc: &EncoderOutput, i: usize) -> Vec<f64> {
        let elog_pi = &self.cache[i].elog_pi;
        (0..self.components[i].len())
            .map(|k| self.elog_gauss_unchecked(enc, i, k) + elog_pi[k])
            .collect()
    }

    /// The analytic E-step: per-block softmax of [`Self::log_scores`].
    pub fn responsibilities(&self, enc: &EncoderOutput) -> Result<Responsibilities> {
        self.check_encoding(enc)?;
        let gamma = (0..self.blocks())
            .map(|i| softmax(&self.log_scores_unchecked(enc, i)))
            .collect();
        Ok(Responsibilities { gamma })
    }

    fn check_resp(&self, resp: &Responsibilities) -> Result<()> {
        check_len("responsibility blocks", self.blocks(), resp.blocks())?;
        for (i, g) in resp.gamma.iter().enumerate() {
            check_len("responsibility length", self.components[i].len(), g.len())?;
        }
        Ok(())
    }

    /// Expected KL between `q(z_i | x)` and component Gaussians, averaged under `γ_i` and `q(μ,α)`.
    pub fn kl_z(&self, enc: &EncoderOutput, resp: &Responsibilities, i: usize) -> Result<f64> {
        self.check_block(i)?;
        self.check_encoding(enc)?;
        self.check_resp(resp)?;
        Ok(self.kl_z_unchecked(enc, resp, i))
    }

    pub(crate) fn kl_z_unchecked(
        &self,
        enc: &EncoderOutput,
        resp: &Responsibilities,
        i: usize,
    ) -> f64 {
        let offset = i * self.dim;
        let neg_entropy: f64 = (0..self.dim)
            .map(|d| -0.5 * (enc.clamped_log_var(offset + d) + 1.0 + LN_2PI))
            .sum();
        let cross: f64 = resp.gamma[i]
            .iter()
            .enumerate()
            .filter(|(_, &g)| g > 0.0)
            .map(|(k, &g)| g * self.elog_gauss_unchecked(enc, i, k))
            .sum();
        floor_kl(neg_entropy - cross)
    }

    /// Expected KL between `q(r_i)` and `p(r_i | π_i)` under `q(π_i)`.
    pub fn kl_r(&self, resp: &Responsibilities, i: usize) -> Result<f64> {
        self.check_block(i)?;
        self.check_resp(resp)?;
        Ok(self.kl_r_unchecked(resp, i))
    }

    pub(crate) fn kl_r_unchecked(&self, resp: &Responsibilities, i: usize) -> f64 {
        let elog_pi = &self.cache[i].elog_pi;
        let value: f64 = resp.gamma[i]
            .iter()
            .zip(elog_pi)
            .filter(|(&g, _)| g > 0.0)
            .map(|(&g, &e)| g * (g.ln() - e))
            .sum();
        floor_kl(value)
    }

    /// Global KL terms: (Σ_ik KL(q(μ_ik, α_ik) ‖ p), Σ_i KL(q(π_i) ‖ p)).
    pub fn global_kl(&self) -> Result<(f64, f64)> {
        let ng_prior = self.hyper.normal_gamma(self.dim)?;
        let mut ng = 0.0;
        let mut dir = 0.0;
        for (comps, mix) in self.components.iter().zip(&self.mixings) {
            for c in comps {
                ng += ng_kl(c, &ng_prior)?;
            }
            dir += dirichlet_kl(mix, &self.hyper.dirichlet(mix.len())?)?;
        }
        Ok((ng, dir))
    }

    /// SVI step: move every factor's natural parameters a fraction `rho` toward the batch optimum.
    pub fn natural_step(
        &self,
        encs: &[EncoderOutput],
        resps: &[Responsibilities],
        n_total: usize,
        rho: f64,
    ) -> Result<Self> {
        self.natural_step_masked(encs, resps, n_total, rho, &vec![false; self.blocks()])
    }

    /// Like [`Self::natural_step`], but blocks with `frozen[i] == true` are copied unchanged.
    pub fn natural_step_masked(
        &self,
        encs: &[EncoderOutput],
        resps: &[Responsibilities],
        n_total: usize,
        rho: f64,
        frozen: &[bool],
    ) -> Result<Self> {
        if !(rho > 0.0 && rho <= 1.0) {
            return Err(FmxError::Domain(format!(
                "step size rho = {rho} outside (0, 1]"
            )));
        }
        if encs.is_empty() {
            return Err(FmxError::Domain(
                "natural step needs a nonempty batch".into(),
            ));
        }
        check_len("responsibilities in batch", encs.len(), resps.len())?;
        check_len("frozen block mask", self.blocks(), frozen.len())?;
        for (enc, resp) in encs.iter().zip(resps) {
            self.check_encoding(enc)?;
            self.check_resp(resp)?;
        }
        let scale = n_total as f64 / encs.len() as f64;
        let h = &self.hyper;
        let dim = self.dim;

        let mut components = self.components.clone();
        let mut mixings = self.mixings.clone();
        for i in 0..self.blocks() {
            if frozen[i] {
                continue;
            }
            let kk = self.components[i].len();
            // Fixed-order sufficient statistics over the batch.
            let mut sum_g = vec![0.0; kk];
            let mut sum_mu = vec![0.0; kk * dim];
            let mut sum_sq = vec![0.0; kk * dim];
            for (enc, resp) in encs.iter().zip(resps) {
                for (k, &g) in resp.gamma[i].iter().enumerate() {
                    if g == 0.0 {
                        continue;
                    }
                    sum_g[k] += g;
                    for d in 0..dim {
                        let j = i * dim + d;
                        let mu = enc.mu[j];
                        sum_mu[k * dim + d] += g * mu;
                        sum_sq[k * dim + d] += g * (mu * mu + enc.variance(j));
                    }
                }
            }
            for k in 0..kk {
                let n_k = scale * sum_g[k];
                let target = NaturalNGParams {
                    l1: vec![h.a0 + 0.5 * n_k - 0.5; dim],
                    l2: (0..dim)
                        .map(|d| {
                            -(h.b0 + 0.5 * h.s0 * h.m0 * h.m0 + 0.5 * scale * sum_sq[k * dim + d])
                        })
                        .collect(),
                    l3: (0..dim)
                        .map(|d| h.s0 * h.m0 + scale * sum_mu[k * dim + d])
                        .collect(),
                    l4: vec![-0.5 * (h.s0 + n_k); dim],
                };
                let current = self.components[i][k].to_natural();
                let updated = current.convex_step(&target, rho);
                components[i][k] = updated.to_mean().map_err(|e| {
                    FmxError::Domain(format!("natural step left valid region at ({i},{k}): {e}"))
                })?;
            }
            let counts: Vec<f64> = self.mixings[i]
                .counts()
                .iter()
                .zip(&sum_g)
                .map(|(&c, &g)| (1.0 - rho) * c + rho * (h.c0 + scale * g))
                .collect();
            mixings[i] = DirichletFactor::new(counts)?;
        }
        Self::from_parts(dim, components, mixings, self.hyper)
    }

    /// Gradient ascent on log-transformed mean parameters of the blocks with `mask[i] == true`.
    pub fn ascend(&self, grad: &PriorGradient, lr: f64, mask: &[bool]) -> Result<Self> {
        check_len("gradient mask", self.blocks(), mask.len())?;
        let dim = self.dim;
        let mut components = self.components.clone();
        let mut mixings = self.mixings.clone();
        for i in 0..self.blocks() {
            if !mask[i] {
                continue;
            }
            for (k, comp) in self.components[i].iter().enumerate() {
                let idx = |d: usize| k * dim + d;
                let m = (0..dim)
                    .map(|d| comp.m()[d] + lr * grad.m[i][idx(d)])
                    .collect();
                let s = (0..dim)
                    .map(|d| comp.s()[d] * (lr * grad.log_s[i][idx(d)]).exp())
                    .collect();
                let a = (0..dim)
                    .map(|d| comp.a()[d] * (lr * grad.log_a[i][idx(d)]).exp())
                    .collect();
                let b = (0..dim)
                    .map(|d| comp.b()[d] * (lr * grad.log_b[i][idx(d)]).exp())
                    .collect();
                components[i][k] = NormalGammaFactor::new(m, s, a, b)?;
            }
            let c = self.mixings[i]
                .counts()
                .iter()
                .zip(&grad.log_c[i])
                .map(|(&c, &g)| c * (lr * g).exp())
                .collect();
            mixings[i] = DirichletFactor::new(c)?;
        }
        Self::from_parts(dim, components, mixings, self.hyper)
    }

    /// Draws `π_i ~ q(π_i)` and then `k_i ~ Categorical(π_i)` for every block.
    pub fn sample_code<R: Rng + ?Sized>(&self, rng: &mut R) -> LatentCode {
        LatentCode {
            k: (0..self.blocks())
                .map(|i| self.sample_index(i, rng))
                .collect(),
        }
    }

    /// Like [`Self::sample_code`], keeping any `Some(k)` entry fixed.
    pub fn sample_code_clamped<R: Rng + ?Sized>(
        &self,
        clamp: &[Option<usize>],
        rng: &mut R,
    ) -> Result<LatentCode> {
        check_len("clamp list", self.blocks(), clamp.len())?;
        let mut k = Vec::with_capacity(self.blocks());
        for (i, c) in clamp.iter().enumerate() {
            match *c {
                Some(idx) => {
                    self.check_component(i, idx)?;
                    k.push(idx);
                }
                None => k.push(self.sample_index(i, rng)),
            }
        }
        Ok(LatentCode { k })
    }

    fn sample_index<R: Rng + ?Sized>(&self, i: usize, rng: &mut R) -> usize {
        let counts = self.mixings[i].counts();
        let draws: Vec<f64> = counts
            .iter()
            .map(|&c| Gamma::new(c, 1.0).expect("positive shape").sample(rng))
            .collect();
        let total: f64 = draws.iter().sum();
        // Every gamma draw can underflow for tiny pseudo-counts; fall back to the Dirichlet mean.
        let (weights, total) = if total > 0.0 && total.is_finite() {
            (draws, total)
        } else {
            (counts.to_vec(), counts.iter().sum())
        };
        let u: f64 = rng.random::<f64>() * total;
        let mut acc = 0.0;
        for (k, w) in weights.iter().enumerate() {
            acc += w;
            if u < acc {
                return k;
            }
        }
        weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
    }

    /// Posterior-predictive draw of block `i` given component `k` (a Student-t per dimension),
    /// drawn as `α ~ Gamma(a, b)` then `z ~ N(m, (1 + 1/s) / α)`.
    pub fn sample_block<R: Rng + ?Sized>(
        &self,
        i: usize,
        k: usize,
        rng: &mut R,
    ) -> Result<Vec<f64>> {
        self.check_component(i, k)?;
        let comp = &self.components[i][k];
        Ok((0..self.dim)
            .map(|d| {
                let (m, s, a, b) = (comp.m()[d], comp.s()[d], comp.a()[d], comp.b()[d]);
                let alpha = Gamma::new(a, 1.0 / b).expect("positive shape").sample(rng);
                let e: f64 = StandardNormal.sample(rng);
                m + ((1.0 + 1.0 / s) / alpha).sqrt() * e
            })
            .collect())
    }

    /// Concatenated block samples for a full code.
    pub fn sample_latent<R: Rng + ?Sized>(
        &self,
        code: &LatentCode,
        rng: &mut R,
    ) -> Result<Vec<f64>> {
        check_len("code length", self.blocks(), code.k.len())?;
        let mut z = Vec::with_capacity(self.latent_dim());
        for (i, &k) in code.k.iter().enumerate() {
            z.extend(self.sample_block(i, k, rng)?);
        }
        Ok(z)
    }

    /// Euclidean distance between two states' natural parameters and pseudo-counts.
    pub fn natural_distance(&self, other: &Self) -> Result<f64> {
        check_len("blocks", self.blocks(), other.blocks())?;
        let mut sq = 0.0;
        for i in 0..self.blocks() {
            check_len(
                "components",
                self.components[i].len(),
                other.components[i].len(),
            )?;
            for (x, y) in self.components[i].iter().zip(&other.components[i]) {
                let (p, q) = (x.to_natural(), y.to_natural());
                for (u, v) in [
                    (&p.l1, &q.l1),
                    (&p.l2, &q.l2),
                    (&p.l3, &q.l3),
                    (&p.l4, &q.l4),
                ] {
                    sq += u.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
                }
            }
            sq += self.mixings[i]
                .counts()
                .iter()
                .zip(other.mixings[i].counts())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>();
        }
        Ok(sq.sqrt())
    }

    pub fn encode(&self, w: &mut ByteWriter) {
        w.u16(PRIOR_CODEC_VERSION);
        w.u32(self.blocks() as u32);
        w.u32(self.dim as u32);
        for comps in &self.components {
            w.u32(comps.len() as u32);
        }
        let h = &self.hyper;
        w.f64s(&[h.m0, h.s0, h.a0, h.b0, h.c0]);
        for comps in &self.components {
            for c in comps {
                w.f64s(c.m());
                w.f64s(c.s());
                w.f64s(c.a());
                w.f64s(c.b());
            }
        }
        for mix in &self.mixings {
            w.f64s(mix.counts());
        }
    }

    pub fn decode(r: &mut ByteReader<'_>) -> Result<Self> {
        let version = r.u16("prior version")?;
        if version != PRIOR_CODEC_VERSION {
            return Err(r.error(format!("unsupported prior section version {version}")));
        }
        let blocks = r.u32("prior I")? as usize;
        let dim = r.u32("prior D")? as usize;
        if blocks == 0 || dim == 0 {
            return Err(r.error("prior section has I = 0 or D = 0"));
        }
        let mut ks = Vec::with_capacity(blocks.min(1 << 16));
        for _ in 0..blocks {
            ks.push(r.u32("prior K_i")? as usize);
        }
        let h = r.f64s(5, "hyperprior")?;
        let hyper = Hyperprior {
            m0: h[0],
            s0: h[1],
            a0: h[2],
            b0: h[3],
            c0: h[4],
        };
        let mut components = Vec::with_capacity(blocks);
        for &k in &ks {
            let mut block = Vec::with_capacity(k.min(1 << 16));
            for _ in 0..k {
                let m = r.f64s(dim, "component m")?;
                let s = r.f64s(dim, "component s")?;
                let a = r.f64s(dim, "component a")?;
                let b = r.f64s(dim, "component b")?;
                block.push(NormalGammaFactor::new(m, s, a, b)?);
            }
            components.push(block);
        }
        let mut mixings = Vec::with_capacity(blocks);
        for &k in &ks {
            mixings.push(DirichletFactor::new(r.f64s(k, "pseudo-counts")?)?);
        }
        Self::from_parts(dim, components, mixings, hyper)
    }
}

fn build_cache(
    components: &[Vec<NormalGammaFactor>],
    mixings: &[DirichletFactor],
) -> Vec<BlockCache> {
    components
        .iter()
        .zip(mixings)
        .map(|(comps, mix)| BlockCache {
            elog_pi: mix.elog_pi(),
            components: comps
                .iter()
                .map(|c| {
                    let mut log_norm = 0.0;
                    let mut precision = Vec::with_capacity(c.dim());
                    for d in 0..c.dim() {
                        let (s, a, b) = (c.s()[d], c.a()[d], c.b()[d]);
                        log_norm += 0.5 * (digamma(a) - b.ln() - LN_2PI - 1.0 / s);
                        precision.push(a / b);
                    }
                    ComponentCache {
                        log_norm,
                        precision,
                    }
                })
                .collect(),
        })
        .collect()
}

/// Max-subtracted softmax.
pub fn softmax(scores: &[f64]) -> Vec<f64> {
    if scores.len() == 1 {
        return vec![1.0];
    }
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|&s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}
