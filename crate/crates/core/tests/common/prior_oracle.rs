use fmx_core::elbo::prior_dependent_elbo;
use fmx_core::expfam::{DirichletFactor, NormalGammaFactor};
use fmx_core::prior::{EncoderOutput, FactorialPriorState, Hyperprior, Responsibilities};
use rand_chacha::ChaCha8Rng;
use rug::Float;

use super::*;

pub fn random_hyper(rng: &mut ChaCha8Rng) -> Hyperprior {
    Hyperprior {
        m0: uniform(rng, -1.0, 1.0),
        s0: uniform(rng, 0.1, 3.0),
        a0: uniform(rng, 0.5, 3.0),
        b0: uniform(rng, 0.5, 3.0),
        c0: uniform(rng, 0.5, 3.0),
    }
}

/// A prior whose factors are drawn independently of the hyperprior.
pub fn random_prior(
    rng: &mut ChaCha8Rng,
    dim: usize,
    ks: &[usize],
    hyper: Hyperprior,
) -> FactorialPriorState {
    let mut comps = Vec::new();
    let mut mixes = Vec::new();
    for &k in ks {
        let block: Vec<NormalGammaFactor> = (0..k)
            .map(|_| {
                let coords: Vec<_> = (0..dim)
                    .map(|_| {
                        (
                            uniform(rng, -2.0, 2.0),
                            uniform(rng, 0.2, 5.0),
                            uniform(rng, 0.5, 5.0),
                            uniform(rng, 0.5, 5.0),
                        )
                    })
                    .collect();
                NormalGammaFactor::new(
                    coords.iter().map(|c| c.0).collect(),
                    coords.iter().map(|c| c.1).collect(),
                    coords.iter().map(|c| c.2).collect(),
                    coords.iter().map(|c| c.3).collect(),
                )
                .unwrap()
            })
            .collect();
        comps.push(block);
        mixes.push(DirichletFactor::new(random_counts(rng, k)).unwrap());
    }
    FactorialPriorState::from_parts(dim, comps, mixes, hyper).unwrap()
}

pub fn random_encoding(rng: &mut ChaCha8Rng, latent: usize) -> EncoderOutput {
    EncoderOutput::new(
        (0..latent).map(|_| uniform(rng, -2.0, 2.0)).collect(),
        (0..latent).map(|_| uniform(rng, -3.0, 1.0)).collect(),
    )
    .unwrap()
}

/// Responsibilities from a direct extended-precision evaluation of the E-step scores.
pub fn mp_responsibilities(prior: &FactorialPriorState, enc: &EncoderOutput) -> Vec<Vec<Float>> {
    let dim = prior.dim();
    let ln_2pi = mp_ln_2pi();
    (0..prior.blocks())
        .map(|i| {
            let counts = prior.mixing(i).counts();
            let psi_total = mp(counts.iter().sum()).digamma();
            let scores: Vec<Float> = (0..prior.ks()[i])
                .map(|k| {
                    let c = prior.component(i, k);
                    let mut score = mp(counts[k]).digamma() - &psi_total;
                    for d in 0..dim {
                        let j = i * dim + d;
                        let (m, s, a, b) = (mp(c.m()[d]), mp(c.s()[d]), mp(c.a()[d]), mp(c.b()[d]));
                        let var = mp(enc.log_var()[j]).exp();
                        let diff = mp(enc.mu()[j]) - &m;
                        let e_log_alpha = a.clone().digamma() - b.clone().ln();
                        let e_alpha = a / &b;
                        let quad = e_alpha * (diff.clone() * &diff + var) + mp(1.0) / s;
                        score += (e_log_alpha - &ln_2pi) / 2u32 - quad / 2u32;
                    }
                    score
                })
                .collect();
            let max = scores.iter().fold(scores[0].clone(), |acc, s| acc.max(s));
            let weights: Vec<Float> = scores.iter().map(|s| (s.clone() - &max).exp()).collect();
            let total = weights.iter().fold(mp(0.0), |acc, w| acc + w);
            weights.into_iter().map(|w| w / &total).collect()
        })
        .collect()
}

/// Worst relative error of `responsibilities()` against [`mp_responsibilities`].
pub fn estep_rel_error(prior: &FactorialPriorState, enc: &EncoderOutput) -> f64 {
    let got = prior.responsibilities(enc).unwrap();
    let want = mp_responsibilities(prior, enc);
    let mut worst = 0.0f64;
    for (i, block) in want.iter().enumerate() {
        for (k, w) in block.iter().enumerate() {
            let g = mp(got.block(i)[k]);
            let rel = ((g - w).abs() / w).to_f64();
            worst = worst.max(rel);
        }
    }
    worst
}

/// Monte-Carlo estimate of `E[log N(z_i; μ_ik, α_ik^-1)]` under `q(z_i|x) q(μ,α)`.
pub fn elog_gauss_mc(
    rng: &mut ChaCha8Rng,
    prior: &FactorialPriorState,
    enc: &EncoderOutput,
    i: usize,
    k: usize,
    draws: usize,
) -> MeanSe {
    let dim = prior.dim();
    let c = prior.component(i, k);
    let half_ln_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
    let mut acc = MeanSe::default();
    for _ in 0..draws {
        let mut v = 0.0;
        for d in 0..dim {
            let j = i * dim + d;
            let z = enc.mu()[j] + (0.5 * enc.log_var()[j]).exp() * normal(rng);
            let (mu, alpha) = sample_normal_gamma(rng, c.m()[d], c.s()[d], c.a()[d], c.b()[d]);
            v += 0.5 * alpha.ln() - half_ln_2pi - 0.5 * alpha * (z - mu) * (z - mu);
        }
        acc.push(v);
    }
    acc
}

/// Monte-Carlo estimate of `kl_z` for block `i`: closed-form Gaussian KL averaged over `q(μ,α)`.
pub fn kl_z_mc(
    rng: &mut ChaCha8Rng,
    prior: &FactorialPriorState,
    enc: &EncoderOutput,
    resp: &Responsibilities,
    i: usize,
    draws: usize,
) -> MeanSe {
    let dim = prior.dim();
    let mut acc = MeanSe::default();
    for _ in 0..draws {
        let mut v = 0.0;
        for (k, &g) in resp.block(i).iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            let c = prior.component(i, k);
            for d in 0..dim {
                let j = i * dim + d;
                let (mu, alpha) = sample_normal_gamma(rng, c.m()[d], c.s()[d], c.a()[d], c.b()[d]);
                let var = enc.log_var()[j].exp();
                let r = enc.mu()[j] - mu;
                v += g * 0.5 * (-alpha.ln() - enc.log_var()[j] + alpha * (var + r * r) - 1.0);
            }
        }
        acc.push(v);
    }
    acc
}

/// Largest per-entry change between two states' natural parameters and pseudo-counts,
/// relative to `max(1, |entry|)`.
pub fn natural_rel_diff(p: &FactorialPriorState, q: &FactorialPriorState) -> f64 {
    let mut worst = 0.0f64;
    let mut cmp = |x: f64, y: f64| worst = worst.max((x - y).abs() / x.abs().max(1.0));
    for i in 0..p.blocks() {
        for k in 0..p.ks()[i] {
            let (u, v) = (
                p.component(i, k).to_natural(),
                q.component(i, k).to_natural(),
            );
            for (a, b) in [
                (&u.l1, &v.l1),
                (&u.l2, &v.l2),
                (&u.l3, &v.l3),
                (&u.l4, &v.l4),
            ] {
                for (&x, &y) in a.iter().zip(b.iter()) {
                    cmp(x, y);
                }
            }
        }
        for (&x, &y) in p.mixing(i).counts().iter().zip(q.mixing(i).counts()) {
            cmp(x, y);
        }
    }
    worst
}

#[derive(Debug, Clone, Copy)]
pub struct FixedPointReport {
    /// Worst relative change of a second `ρ = 1` step with the same batch.
    pub idempotence: f64,
    /// Smallest change of the prior-dependent ELBO across a natural step (γ frozen).
    pub min_step_gain: f64,
    /// Smallest change across an E-step (`q(ξ)` frozen).
    pub min_estep_gain: f64,
}

/// Alternates full-batch `ρ = 1` natural steps and E-steps on fixed encoder outputs.
pub fn fixed_point_instance(rng: &mut ChaCha8Rng, alternations: usize) -> FixedPointReport {
    let dim = 1 + (rng.random::<u32>() % 3) as usize;
    let blocks = 1 + (rng.random::<u32>() % 3) as usize;
    let ks: Vec<usize> = (0..blocks)
        .map(|_| 1 + (rng.random::<u32>() % 4) as usize)
        .collect();
    let hyper = random_hyper(rng);
    let mut prior = random_prior(rng, dim, &ks, hyper);
    let n = 10 + (rng.random::<u32>() % 40) as usize;
    let encs: Vec<EncoderOutput> = (0..n).map(|_| random_encoding(rng, dim * blocks)).collect();
    let mut resps: Vec<Responsibilities> = encs
        .iter()
        .map(|e| prior.responsibilities(e).unwrap())
        .collect();
    let mut report = FixedPointReport {
        idempotence: 0.0,
        min_step_gain: f64::INFINITY,
        min_estep_gain: f64::INFINITY,
    };
    let mut elbo = prior_dependent_elbo(&prior, &encs, &resps).unwrap();
    for _ in 0..alternations {
        let next = prior.natural_step(&encs, &resps, n, 1.0).unwrap();
        let again = next.natural_step(&encs, &resps, n, 1.0).unwrap();
        report.idempotence = report.idempotence.max(natural_rel_diff(&next, &again));
        let after = prior_dependent_elbo(&next, &encs, &resps).unwrap();
        report.min_step_gain = report.min_step_gain.min(after - elbo);
        prior = next;
        resps = encs
            .iter()
            .map(|e| prior.responsibilities(e).unwrap())
            .collect();
        let after_e = prior_dependent_elbo(&prior, &encs, &resps).unwrap();
        report.min_estep_gain = report.min_estep_gain.min(after_e - after);
        elbo = after_e;
    }
    report
}

#[derive(Debug, Clone, Copy)]
pub struct StudentReport {
    pub ks_p: f64,
    /// Mean error in standard errors at `a = 2`.
    pub mean_z: f64,
    /// Relative variance error at `a = 3`.
    pub var_rel: f64,
    /// The same variance error in standard errors.
    pub var_z: f64,
}

fn single_component(m: f64, s: f64, a: f64, b: f64) -> FactorialPriorState {
    FactorialPriorState::from_parts(
        1,
        vec![vec![NormalGammaFactor::broadcast(1, m, s, a, b).unwrap()]],
        vec![DirichletFactor::symmetric(1, 1.0).unwrap()],
        Hyperprior::default(),
    )
    .unwrap()
}

/// `sample_block` against the compound oracle (draw `(μ, α)` then `z ~ N(μ, 1/α)`) and the
/// Student-t moments.
pub fn student_t_checks(
    rng: &mut ChaCha8Rng,
    ks_draws: usize,
    moment_draws: usize,
) -> StudentReport {
    let (m, s, a, b) = (0.7, 1.5, 2.5, 1.2);
    let prior = single_component(m, s, a, b);
    let sampled: Vec<f64> = (0..ks_draws)
        .map(|_| prior.sample_block(0, 0, rng).unwrap()[0])
        .collect();
    let compound: Vec<f64> = (0..ks_draws)
        .map(|_| {
            let (mu, alpha) = sample_normal_gamma(rng, m, s, a, b);
            mu + normal(rng) / alpha.sqrt()
        })
        .collect();
    let (_, ks_p) = ks_two_sample(sampled, compound);

    let (m2, s2, b2) = (-1.3, 0.8, 2.0);
    let prior2 = single_component(m2, s2, 2.0, b2);
    let mut mean = MeanSe::default();
    for _ in 0..moment_draws {
        mean.push(prior2.sample_block(0, 0, rng).unwrap()[0]);
    }

    let prior3 = single_component(m2, s2, 3.0, b2);
    let mut var = MeanSe::default();
    for _ in 0..moment_draws {
        let z = prior3.sample_block(0, 0, rng).unwrap()[0];
        var.push((z - m2) * (z - m2));
    }
    let scale_sq = b2 * (1.0 + 1.0 / s2) / 3.0;
    let dof = 6.0;
    let want_var = scale_sq * dof / (dof - 2.0);
    StudentReport {
        ks_p,
        mean_z: mean.z(m2),
        var_rel: (var.mean() - want_var).abs() / want_var,
        var_z: var.z(want_var),
    }
}
