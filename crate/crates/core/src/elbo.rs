//! Training objective, semi-supervised objective and the predictive bound.
//!
//! Mini-batch estimates follow the convention that per-datum terms are scaled by `N/|B|` and
//! the global KL terms enter once per batch, so that the expectation over batches is the
//! full-data ELBO. All gradients returned here are gradients of the objective being
//! *maximized*.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, FmxError, Result};
use crate::nets::{reparam_backward, reparam_sample, GradientBuffer, Model};
use crate::prior::{softmax, EncoderOutput, FactorialPriorState, PriorGradient, Responsibilities};
use crate::special::{digamma, trigamma};

/// Observed one-hot labels of one datum, keyed by block index.
pub type DatumLabels = BTreeMap<usize, Vec<f64>>;

/// Mini-batch estimate of the ELBO, split into its terms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ElboBreakdown {
    /// `N/|B| · Σ_B E_q[log p(x|z)]`
    pub recon: f64,
    /// `N/|B| · Σ_B Σ_i KL[z_i]`, without any KL up-weighting.
    pub kl_z: f64,
    /// `N/|B| · Σ_B Σ_i KL[r_i]`
    pub kl_r: f64,
    /// `Σ_ik KL(q(μ_ik, α_ik) ‖ p)`, before the `1/N` split.
    pub kl_global_ng: f64,
    /// `Σ_i KL(q(π_i) ‖ p)`, before the `1/N` split.
    pub kl_global_dir: f64,
    /// `N/|B|`
    pub scale: f64,
    /// Number of data points in the batch.
    pub batch_size: usize,
    pub n_total: usize,
    pub total: f64,
    /// `N/|B| · Σ_B Σ_{labeled i} Σ_k y_ik log g_ik`
    pub class_log_lik: f64,
    /// The optimized objective: ELBO with the KL up-weighting plus `Δ · class_log_lik`.
    pub objective: f64,
}

impl ElboBreakdown {
    /// Recomputes `total` from its parts.
    pub fn reconstructed_total(&self) -> f64 {
        let batch_weight = self.scale * self.batch_size as f64;
        self.recon
            - self.kl_z
            - self.kl_r
            - (self.kl_global_ng + self.kl_global_dir) / self.n_total as f64 * batch_weight
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SemiSupConfig {
    /// Weight of the classification term (`Δ ≥ 0`).
    pub delta: f64,
    /// Multiplier on the expected KL[z] term (`> 0`).
    pub beta_kl: f64,
}

impl Default for SemiSupConfig {
    fn default() -> Self {
        Self {
            delta: 1000.0,
            beta_kl: 1.0,
        }
    }
}

impl SemiSupConfig {
    pub fn unsupervised() -> Self {
        Self {
            delta: 0.0,
            beta_kl: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.delta >= 0.0) || !self.delta.is_finite() {
            return Err(FmxError::Config(format!(
                "delta must be >= 0, got {}",
                self.delta
            )));
        }
        if !(self.beta_kl > 0.0) || !self.beta_kl.is_finite() {
            return Err(FmxError::Config(format!(
                "beta_kl must be > 0, got {}",
                self.beta_kl
            )));
        }
        Ok(())
    }
}

/// Gradients of the objective with respect to θ, φ and (optionally) the mean parameters of `q(ξ)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectiveGradients {
    pub encoder: GradientBuffer,
    pub decoder: GradientBuffer,
    pub prior: Option<PriorGradient>,
}

/// One datum of a training batch. `gamma` is held fixed (no gradient flows into it).
#[derive(Clone, Copy, Debug)]
pub struct BatchItem<'a> {
    pub x: &'a [f64],
    pub eps: &'a [f64],
    pub gamma: &'a Responsibilities,
    pub labels: Option<&'a DatumLabels>,
}

/// Per-datum local terms (unscaled).
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LocalTerms {
    pub recon: f64,
    pub kl_z: f64,
    pub kl_r: f64,
    pub class_log_lik: f64,
}

/// Checks that every label names an existing block and is one-hot of length `K_i`.
pub fn validate_labels(labels: &DatumLabels, prior: &FactorialPriorState) -> Result<()> {
    let ks = prior.ks();
    for (&i, y) in labels {
        if i >= ks.len() {
            return Err(FmxError::Index {
                what: "labeled block",
                index: i,
                limit: ks.len(),
            });
        }
        check_len("label length", ks[i], y.len())?;
        let ones = y.iter().filter(|&&v| v == 1.0).count();
        let zeros = y.iter().filter(|&&v| v == 0.0).count();
        if ones != 1 || ones + zeros != y.len() {
            return Err(FmxError::Domain(format!(
                "label for block {i} is not one-hot: {y:?}"
            )));
        }
    }
    Ok(())
}

/// Replaces labeled blocks of `gamma` by their one-hot labels.
pub fn clamp_responsibilities(
    gamma: &mut Responsibilities,
    labels: Option<&DatumLabels>,
) -> Result<()> {
    if let Some(labels) = labels {
        for (&i, y) in labels {
            gamma.clamp_block(i, y)?;
        }
    }
    Ok(())
}

struct DatumResult {
    terms: LocalTerms,
    encoder: GradientBuffer,
    decoder: GradientBuffer,
    prior: Option<PriorGradient>,
}

/// Evaluates one datum's local terms and their gradients (weighted by `scale`).
fn datum_pass(
    model: &Model,
    prior: &FactorialPriorState,
    item: &BatchItem<'_>,
    cfg: &SemiSupConfig,
    scale: f64,
    want_prior: bool,
) -> Result<DatumResult> {
    let latent = prior.latent_dim();
    let dim = prior.dim();
    let enc_cache = model.encoder.forward_cached(item.x)?;
    let enc = EncoderOutput::from_raw(enc_cache.output())?;
    check_len("encoder output vs prior", latent, enc.len())?;
    let z = reparam_sample(&enc, item.eps)?;
    let dec_cache = model.decoder.forward_cached(&z)?;
    let raw = dec_cache.output();
    let recon = model.log_lik_raw(item.x, raw)?;

    let mut terms = LocalTerms {
        recon,
        ..Default::default()
    };
    for i in 0..prior.blocks() {
        terms.kl_z += prior.kl_z_unchecked(&enc, item.gamma, i);
        terms.kl_r += prior.kl_r_unchecked(item.gamma, i);
    }

    // Reconstruction path.
    let mut dec_grad = model.decoder.zero_grad();
    let d_raw: Vec<f64> = model
        .log_lik_raw_grad(item.x, raw)
        .into_iter()
        .map(|g| scale * g)
        .collect();
    let dz = model.decoder.backward(&dec_cache, &d_raw, &mut dec_grad)?;
    let mut d_mu = vec![0.0; latent];
    let mut d_lv = vec![0.0; latent];
    reparam_backward(&enc, item.eps, &dz, &mut d_mu, &mut d_lv);

    let mut prior_grad = want_prior.then(|| PriorGradient::zeros(prior));

    for i in 0..prior.blocks() {
        let kk = prior.ks()[i];
        let gamma = item.gamma.block(i);
        // Weights on E[log N_ik] and E[log π_ik] in the objective.
        let mut w_gauss: Vec<f64> = gamma.iter().map(|&g| cfg.beta_kl * g).collect();
        let mut w_pi: Vec<f64> = gamma.to_vec();
        if let Some(y) = item.labels.and_then(|l| l.get(&i)) {
            let scores = prior.log_scores_unchecked(&enc, i);
            let g = softmax(&scores);
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + scores.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
            terms.class_log_lik += y
                .iter()
                .zip(&scores)
                .map(|(&yk, &s)| yk * (s - lse))
                .sum::<f64>();
            for k in 0..kk {
                let adj = cfg.delta * (y[k] - g[k]);
                w_gauss[k] += adj;
                w_pi[k] += adj;
            }
        }

        // Entropy part of -β KL[z]: +β·½ per log-variance.
        for d in 0..dim {
            let j = i * dim + d;
            if enc.log_var_active(j) {
                d_lv[j] += scale * cfg.beta_kl * 0.5;
            }
        }
        for k in 0..kk {
            let w = w_gauss[k];
            if w == 0.0 {
                continue;
            }
            let comp = prior.component(i, k);
            let prec = prior.expected_precision(i, k);
            for d in 0..dim {
                let j = i * dim + d;
                let diff = enc.mu()[j] - comp.m()[d];
                let var = enc.variance(j);
                d_mu[j] -= scale * w * prec[d] * diff;
                if enc.log_var_active(j) {
                    d_lv[j] -= scale * w * 0.5 * prec[d] * var;
                }
                if let Some(pg) = prior_grad.as_mut() {
                    let (s, a, b) = (comp.s()[d], comp.a()[d], comp.b()[d]);
                    let q = diff * diff + var;
                    let idx = k * dim + d;
                    pg.m[i][idx] += scale * w * prec[d] * diff;
                    pg.log_s[i][idx] += scale * w * 0.5 / s;
                    pg.log_a[i][idx] += scale * w * 0.5 * a * (trigamma(a) - q / b);
                    pg.log_b[i][idx] += scale * w * 0.5 * (-1.0 + a * q / b);
                }
            }
        }
        if let Some(pg) = prior_grad.as_mut() {
            let counts = prior.mixing(i).counts();
            let tri_total = trigamma(counts.iter().sum());
            let w_sum: f64 = w_pi.iter().sum();
            for k in 0..kk {
                let dc = w_pi[k] * trigamma(counts[k]) - tri_total * w_sum;
                pg.log_c[i][k] += scale * counts[k] * dc;
            }
        }
    }

    let mut enc_grad = model.encoder.zero_grad();
    let mut adjoint = d_mu;
    adjoint.extend(d_lv);
    model
        .encoder
        .backward(&enc_cache, &adjoint, &mut enc_grad)?;

    Ok(DatumResult {
        terms,
        encoder: enc_grad,
        decoder: dec_grad,
        prior: prior_grad,
    })
}

/// Gradient of `-(Σ KL_NG + Σ KL_Dir)` with respect to log-transformed mean parameters.
fn global_kl_gradient(prior: &FactorialPriorState, out: &mut PriorGradient) {
    let h = prior.hyper();
    let dim = prior.dim();
    for i in 0..prior.blocks() {
        for k in 0..prior.ks()[i] {
            let c = prior.component(i, k);
            for d in 0..dim {
                let (m, s, a, b) = (c.m()[d], c.s()[d], c.a()[d], c.b()[d]);
                let dm = m - h.m0;
                let g_m = h.s0 * (a / b) * dm;
                let g_s = 0.5 * (1.0 / s - h.s0 / (s * s));
                let g_a = 0.5 * h.s0 * dm * dm / b + (a - h.a0) * trigamma(a) - (b - h.b0) / b;
                let g_b = -0.5 * h.s0 * a * dm * dm / (b * b) + h.a0 / b - a * h.b0 / (b * b);
                let idx = k * dim + d;
                out.m[i][idx] -= g_m;
                out.log_s[i][idx] -= s * g_s;
                out.log_a[i][idx] -= a * g_a;
                out.log_b[i][idx] -= b * g_b;
            }
        }
        let counts = prior.mixing(i).counts();
        let total: f64 = counts.iter().sum();
        let total0 = h.c0 * counts.len() as f64;
        let tri_total = trigamma(total);
        for (k, &ck) in counts.iter().enumerate() {
            let g = (ck - h.c0) * trigamma(ck) - tri_total * (total - total0);
            out.log_c[i][k] -= ck * g;
        }
    }
}

/// Mini-batch ELBO (and semi-supervised objective when `cfg.delta > 0` and labels are present),
/// with gradients for θ and φ and, when `want_prior` is set, for the mean parameters of `q(ξ)`.
pub fn train_elbo(
    model: &Model,
    prior: &FactorialPriorState,
    batch: &[BatchItem<'_>],
    n_total: usize,
    cfg: &SemiSupConfig,
    want_prior: bool,
) -> Result<(ElboBreakdown, ObjectiveGradients)> {
    cfg.validate()?;
    if batch.is_empty() {
        return Err(FmxError::Config("empty batch".into()));
    }
    if n_total < batch.len() {
        return Err(FmxError::Config(format!(
            "dataset size {n_total} smaller than batch {}",
            batch.len()
        )));
    }
    check_len(
        "model latent size vs prior",
        prior.latent_dim(),
        model.latent_dim(),
    )?;
    for item in batch {
        check_len("responsibility blocks", prior.blocks(), item.gamma.blocks())?;
        if let Some(labels) = item.labels {
            validate_labels(labels, prior)?;
        }
    }
    let scale = n_total as f64 / batch.len() as f64;
    let results: Vec<Result<DatumResult>> = batch
        .par_iter()
        .map(|item| datum_pass(model, prior, item, cfg, scale, want_prior))
        .collect();

    let mut enc_grad = model.encoder.zero_grad();
    let mut dec_grad = model.decoder.zero_grad();
    let mut prior_grad = want_prior.then(|| PriorGradient::zeros(prior));
    let mut sums = LocalTerms::default();
    for r in results {
        let r = r?;
        sums.recon += r.terms.recon;
        sums.kl_z += r.terms.kl_z;
        sums.kl_r += r.terms.kl_r;
        sums.class_log_lik += r.terms.class_log_lik;
        enc_grad.add(&r.encoder);
        dec_grad.add(&r.decoder);
        if let (Some(acc), Some(g)) = (prior_grad.as_mut(), r.prior.as_ref()) {
            acc.add(g);
        }
    }
    if let Some(pg) = prior_grad.as_mut() {
        global_kl_gradient(prior, pg);
    }
    let (kl_ng, kl_dir) = prior.global_kl()?;
    let mut out = ElboBreakdown {
        recon: scale * sums.recon,
        kl_z: scale * sums.kl_z,
        kl_r: scale * sums.kl_r,
        kl_global_ng: kl_ng,
        kl_global_dir: kl_dir,
        scale,
        batch_size: batch.len(),
        n_total,
        class_log_lik: scale * sums.class_log_lik,
        ..Default::default()
    };
    out.total = out.reconstructed_total();
    out.objective = out.recon - cfg.beta_kl * out.kl_z - out.kl_r - (kl_ng + kl_dir)
        + cfg.delta * out.class_log_lik;
    if !out.objective.is_finite() || !enc_grad.is_finite() || !dec_grad.is_finite() {
        return Err(FmxError::Numeric("non-finite objective or gradient".into()));
    }
    Ok((
        out,
        ObjectiveGradients {
            encoder: enc_grad,
            decoder: dec_grad,
            prior: prior_grad,
        },
    ))
}

/// The semi-supervised objective `F = L + Δ Σ y log g`; every labeled datum must carry labels.
pub fn semi_sup_objective(
    model: &Model,
    prior: &FactorialPriorState,
    batch: &[BatchItem<'_>],
    n_total: usize,
    cfg: &SemiSupConfig,
) -> Result<(f64, ObjectiveGradients)> {
    let (breakdown, grads) = train_elbo(model, prior, batch, n_total, cfg, true)?;
    Ok((breakdown.objective, grads))
}

/// Closed-form `KL(N(μ, σ²) ‖ N(0, I))`.
pub fn standard_normal_kl(enc: &EncoderOutput) -> f64 {
    (0..enc.len())
        .map(|j| {
            let mu = enc.mu()[j];
            let lv = enc.clamped_log_var(j);
            0.5 * (mu * mu + lv.exp() - lv - 1.0)
        })
        .sum()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct VanillaBreakdown {
    pub recon: f64,
    pub kl: f64,
    pub anneal: f64,
    /// `recon − anneal · kl`
    pub objective: f64,
}

/// Mini-batch VAE objective with a `N(0, I)` prior and annealed KL weight.
pub fn vanilla_elbo(
    model: &Model,
    xs: &[&[f64]],
    eps: &[Vec<f64>],
    n_total: usize,
    anneal: f64,
) -> Result<(VanillaBreakdown, ObjectiveGradients)> {
    check_len("noise draws per datum", xs.len(), eps.len())?;
    if xs.is_empty() {
        return Err(FmxError::Config("empty batch".into()));
    }
    let scale = n_total as f64 / xs.len() as f64;
    let latent = model.latent_dim();
    let results: Vec<Result<(f64, f64, GradientBuffer, GradientBuffer)>> = xs
        .par_iter()
        .zip(eps.par_iter())
        .map(|(x, e)| {
            let enc_cache = model.encoder.forward_cached(x)?;
            let enc = EncoderOutput::from_raw(enc_cache.output())?;
            let z = reparam_sample(&enc, e)?;
            let dec_cache = model.decoder.forward_cached(&z)?;
            let raw = dec_cache.output();
            let recon = model.log_lik_raw(x, raw)?;
            let kl = standard_normal_kl(&enc);
            let mut dec_grad = model.decoder.zero_grad();
            let d_raw: Vec<f64> = model
                .log_lik_raw_grad(x, raw)
                .into_iter()
                .map(|g| scale * g)
                .collect();
            let dz = model.decoder.backward(&dec_cache, &d_raw, &mut dec_grad)?;
            let mut d_mu = vec![0.0; latent];
            let mut d_lv = vec![0.0; latent];
            reparam_backward(&enc, e, &dz, &mut d_mu, &mut d_lv);
            for j in 0..latent {
                d_mu[j] -= scale * anneal * enc.mu()[j];
                if enc.log_var_active(j) {
                    d_lv[j] -= scale * anneal * 0.5 * (enc.variance(j) - 1.0);
                }
            }
            let mut enc_grad = model.encoder.zero_grad();
            d_mu.extend(d_lv);
            model.encoder.backward(&enc_cache, &d_mu, &mut enc_grad)?;
            Ok((recon, kl, enc_grad, dec_grad))
        })
        .collect();
    let mut enc_grad = model.encoder.zero_grad();
    let mut dec_grad = model.decoder.zero_grad();
    let (mut recon, mut kl) = (0.0, 0.0);
    for r in results {
        let (rc, k, eg, dg) = r?;
        recon += rc;
        kl += k;
        enc_grad.add(&eg);
        dec_grad.add(&dg);
    }
    let out = VanillaBreakdown {
        recon: scale * recon,
        kl: scale * kl,
        anneal,
        objective: scale * (recon - anneal * kl),
    };
    if !out.objective.is_finite() || !enc_grad.is_finite() || !dec_grad.is_finite() {
        return Err(FmxError::Numeric(
            "non-finite vanilla objective or gradient".into(),
        ));
    }
    Ok((
        out,
        ObjectiveGradients {
            encoder: enc_grad,
            decoder: dec_grad,
            prior: None,
        },
    ))
}

/// Predictive bound for one datum.
#[derive(Clone, Debug, PartialEq)]
pub struct TestElbo {
    pub recon: f64,
    pub kl_z: f64,
    pub kl_r: f64,
    pub bound: f64,
    pub gamma: Responsibilities,
}

/// Evaluates the predictive bound with `q(r)` at its optimum and `q(ξ)` held fixed.
pub fn test_elbo<R: Rng + ?Sized>(
    x: &[f64],
    model: &Model,
    prior: &FactorialPriorState,
    n_samples: usize,
    rng: &mut R,
) -> Result<TestElbo> {
    if n_samples < 1 {
        return Err(FmxError::Config("test ELBO needs n_samples >= 1".into()));
    }
    let latent = model.latent_dim();
    let eps: Vec<Vec<f64>> = (0..n_samples)
        .map(|_| (0..latent).map(|_| StandardNormal.sample(rng)).collect())
        .collect();
    test_elbo_with_noise(x, model, prior, &eps)
}

/// [`test_elbo`] with explicit reparameterization noise, one vector per sample.
pub fn test_elbo_with_noise(
    x: &[f64],
    model: &Model,
    prior: &FactorialPriorState,
    eps: &[Vec<f64>],
) -> Result<TestElbo> {
    if eps.is_empty() {
        return Err(FmxError::Config("test ELBO needs n_samples >= 1".into()));
    }
    let enc = model.encode_x(x)?;
    let gamma = prior.responsibilities(&enc)?;
    let mut recon = 0.0;
    for e in eps {
        let z = reparam_sample(&enc, e)?;
        recon += model.log_lik(x, &z)?;
    }
    recon /= eps.len() as f64;
    let mut kl_z = 0.0;
    let mut kl_r = 0.0;
    for i in 0..prior.blocks() {
        kl_z += prior.kl_z(&enc, &gamma, i)?;
        kl_r += prior.kl_r(&gamma, i)?;
    }
    Ok(TestElbo {
        recon,
        kl_z,
        kl_r,
        bound: recon - kl_z - kl_r,
        gamma,
    })
}

/// The part of the full-data ELBO that depends on `q(ξ)` and `γ`:
/// `−Σ_n Σ_i (KL[z_i] + KL[r_i]) − Σ KL_global`, with `N = encs.len()`.
pub fn prior_dependent_elbo(
    prior: &FactorialPriorState,
    encs: &[EncoderOutput],
    resps: &[Responsibilities],
) -> Result<f64> {
    check_len("responsibilities per encoding", encs.len(), resps.len())?;
    let mut total = 0.0;
    for (enc, resp) in encs.iter().zip(resps) {
        for i in 0..prior.blocks() {
            total -= prior.kl_z(enc, resp, i)? + prior.kl_r(resp, i)?;
        }
    }
    let (ng, dir) = prior.global_kl()?;
    Ok(total - ng - dir)
}

/// `E[log π]` helper exposed for oracles: `ψ(c_k) − ψ(Σ c)`.
pub fn expected_log_weights(counts: &[f64]) -> Vec<f64> {
    let total = digamma(counts.iter().sum());
    counts.iter().map(|&c| digamma(c) - total).collect()
}
