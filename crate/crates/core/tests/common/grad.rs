use super::normal;
use fmx_core::elbo::{train_elbo, vanilla_elbo, BatchItem, DatumLabels, SemiSupConfig};
use fmx_core::expfam::{DirichletFactor, NormalGammaFactor};
use fmx_core::nets::{finite_difference_check, Architecture, Likelihood, Model, Network};
use fmx_core::prior::{FactorialPriorState, Hyperprior, PriorGradient, Responsibilities};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-5;
pub const TOL: f64 = 1e-4;
pub const FLOOR: f64 = 1e-6;

pub struct Problem {
    pub model: Model,
    pub prior: FactorialPriorState,
    pub xs: Vec<Vec<f64>>,
    pub eps: Vec<Vec<f64>>,
    pub labels: Vec<Option<DatumLabels>>,
    pub n_total: usize,
}

fn random_prior(rng: &mut ChaCha8Rng, dim: usize, ks: &[usize]) -> FactorialPriorState {
    let mut comps = Vec::new();
    let mut mixes = Vec::new();
    for &k in ks {
        let mut block = Vec::new();
        for _ in 0..k {
            let m = (0..dim).map(|_| normal(rng)).collect();
            let s = (0..dim).map(|_| rng.random_range(0.5..3.0)).collect();
            let a = (0..dim).map(|_| rng.random_range(1.0..4.0)).collect();
            let b = (0..dim).map(|_| rng.random_range(0.5..3.0)).collect();
            block.push(NormalGammaFactor::new(m, s, a, b).unwrap());
        }
        comps.push(block);
        mixes.push(
            DirichletFactor::new((0..k).map(|_| rng.random_range(0.5..5.0)).collect()).unwrap(),
        );
    }
    let hyper = Hyperprior {
        m0: 0.3,
        s0: 0.7,
        a0: 1.5,
        b0: 0.8,
        c0: 1.2,
    };
    FactorialPriorState::from_parts(dim, comps, mixes, hyper).unwrap()
}

pub fn problem(seed: u64, likelihood: Likelihood, labeled: bool) -> Problem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (dim, ks) = (2, vec![3, 2]);
    let latent = dim * ks.len();
    let pixels = 5;
    let encoder =
        Network::init(Architecture::tanh_hidden(pixels, 7, 2 * latent), &mut rng).unwrap();
    let decoder = Network::init(
        Architecture::tanh_hidden(latent, 6, likelihood.decoder_outputs(pixels)),
        &mut rng,
    )
    .unwrap();
    let model = Model::new(encoder, decoder, likelihood).unwrap();
    let prior = random_prior(&mut rng, dim, &ks);
    let batch = 4;
    let xs = (0..batch)
        .map(|_| {
            (0..pixels)
                .map(|_| match likelihood {
                    Likelihood::Bernoulli => f64::from(rng.random_bool(0.4) as u8),
                    Likelihood::Gaussian => normal(&mut rng),
                })
                .collect()
        })
        .collect();
    let eps = (0..batch)
        .map(|_| (0..latent).map(|_| normal(&mut rng)).collect())
        .collect();
    let labels = (0..batch)
        .map(|n| {
            (labeled && n % 2 == 0).then(|| {
                let mut y = vec![0.0; ks[1]];
                y[n % ks[1]] = 1.0;
                DatumLabels::from([(1, y)])
            })
        })
        .collect();
    Problem {
        model,
        prior,
        xs,
        eps,
        labels,
        n_total: 3 * batch,
    }
}

/// How `γ` is chosen for each evaluation of the objective.
#[derive(Clone, Copy)]
pub enum Gamma<'a> {
    Fixed(&'a [Responsibilities]),
    Optimal,
}

pub fn evaluate(
    model: &Model,
    prior: &FactorialPriorState,
    p: &Problem,
    gamma: Gamma<'_>,
    cfg: &SemiSupConfig,
    want_prior: bool,
) -> (f64, fmx_core::elbo::ObjectiveGradients) {
    let gammas: Vec<Responsibilities> = match gamma {
        Gamma::Fixed(g) => g.to_vec(),
        Gamma::Optimal => {
            p.xs.iter()
                .zip(&p.labels)
                .map(|(x, l)| {
                    let mut g = prior.responsibilities(&model.encode_x(x).unwrap()).unwrap();
                    fmx_core::elbo::clamp_responsibilities(&mut g, l.as_ref()).unwrap();
                    g
                })
                .collect()
        }
    };
    let batch: Vec<BatchItem<'_>> = (0..p.xs.len())
        .map(|n| BatchItem {
            x: &p.xs[n],
            eps: &p.eps[n],
            gamma: &gammas[n],
            labels: p.labels[n].as_ref(),
        })
        .collect();
    let (b, g) = train_elbo(model, prior, &batch, p.n_total, cfg, want_prior).unwrap();
    (b.objective, g)
}

fn flatten_prior(prior: &FactorialPriorState) -> Vec<f64> {
    let mut out = Vec::new();
    for i in 0..prior.blocks() {
        for k in 0..prior.ks()[i] {
            let c = prior.component(i, k);
            out.extend_from_slice(c.m());
            out.extend(c.s().iter().map(|v| v.ln()));
            out.extend(c.a().iter().map(|v| v.ln()));
            out.extend(c.b().iter().map(|v| v.ln()));
        }
        out.extend(prior.mixing(i).counts().iter().map(|v| v.ln()));
    }
    out
}

fn unflatten_prior(template: &FactorialPriorState, v: &[f64]) -> FactorialPriorState {
    let dim = template.dim();
    let mut pos = 0;
    let mut take = |n: usize| {
        let s = v[pos..pos + n].to_vec();
        pos += n;
        s
    };
    let exp = |x: Vec<f64>| x.into_iter().map(f64::exp).collect::<Vec<_>>();
    let mut comps = Vec::new();
    let mut mixes = Vec::new();
    for &k in &template.ks() {
        let mut block = Vec::new();
        for _ in 0..k {
            let m = take(dim);
            let s = exp(take(dim));
            let a = exp(take(dim));
            let b = exp(take(dim));
            block.push(NormalGammaFactor::new(m, s, a, b).unwrap());
        }
        comps.push(block);
        mixes.push(DirichletFactor::new(exp(take(k))).unwrap());
    }
    FactorialPriorState::from_parts(dim, comps, mixes, *template.hyper()).unwrap()
}

fn flatten_prior_grad(g: &PriorGradient, prior: &FactorialPriorState) -> Vec<f64> {
    let dim = prior.dim();
    let mut out = Vec::new();
    for i in 0..prior.blocks() {
        for k in 0..prior.ks()[i] {
            let r = k * dim..(k + 1) * dim;
            out.extend_from_slice(&g.m[i][r.clone()]);
            out.extend_from_slice(&g.log_s[i][r.clone()]);
            out.extend_from_slice(&g.log_a[i][r.clone()]);
            out.extend_from_slice(&g.log_b[i][r]);
        }
        out.extend_from_slice(&g.log_c[i]);
    }
    out
}

pub fn check_all(p: &Problem, gamma: Gamma<'_>, cfg: &SemiSupConfig) -> (f64, f64, f64) {
    let (_, grads) = evaluate(&p.model, &p.prior, p, gamma, cfg, true);

    let enc_params = p.model.encoder.params().to_vec();
    let all: Vec<usize> = (0..enc_params.len()).collect();
    let enc_err =
        finite_difference_check(&enc_params, &grads.encoder.values, &all, H, FLOOR, |v| {
            let mut m = p.model.clone();
            m.encoder.params_mut().copy_from_slice(v);
            evaluate(&m, &p.prior, p, gamma, cfg, false).0
        });

    let dec_params = p.model.decoder.params().to_vec();
    let all: Vec<usize> = (0..dec_params.len()).collect();
    let dec_err =
        finite_difference_check(&dec_params, &grads.decoder.values, &all, H, FLOOR, |v| {
            let mut m = p.model.clone();
            m.decoder.params_mut().copy_from_slice(v);
            evaluate(&m, &p.prior, p, gamma, cfg, false).0
        });

    let flat = flatten_prior(&p.prior);
    let analytic = flatten_prior_grad(grads.prior.as_ref().unwrap(), &p.prior);
    let all: Vec<usize> = (0..flat.len()).collect();
    let prior_err = finite_difference_check(&flat, &analytic, &all, H, FLOOR, |v| {
        let q = unflatten_prior(&p.prior, v);
        evaluate(&p.model, &q, p, gamma, cfg, false).0
    });
    (enc_err, dec_err, prior_err)
}

pub fn fixed_gammas(p: &Problem, rng: &mut ChaCha8Rng) -> Vec<Responsibilities> {
    p.xs.iter()
        .map(|_| {
            let blocks = p
                .prior
                .ks()
                .iter()
                .map(|&k| {
                    let w: Vec<f64> = (0..k).map(|_| rng.random_range(0.1..1.0)).collect();
                    let s: f64 = w.iter().sum();
                    w.into_iter().map(|v| v / s).collect()
                })
                .collect();
            Responsibilities::new(blocks).unwrap()
        })
        .collect()
}

/// Worst relative finite-difference error for encoder, decoder and prior parameters.
pub type GradReport = (String, [f64; 3]);

pub fn vanilla_errors(p: &Problem) -> [f64; 3] {
    let xs: Vec<&[f64]> = p.xs.iter().map(|x| x.as_slice()).collect();
    let (_, grads) = vanilla_elbo(&p.model, &xs, &p.eps, p.n_total, 0.7).unwrap();
    let f = |m: &Model| {
        vanilla_elbo(m, &xs, &p.eps, p.n_total, 0.7)
            .unwrap()
            .0
            .objective
    };
    let enc = p.model.encoder.params().to_vec();
    let idx: Vec<usize> = (0..enc.len()).collect();
    let e = finite_difference_check(&enc, &grads.encoder.values, &idx, H, FLOOR, |v| {
        let mut m = p.model.clone();
        m.encoder.params_mut().copy_from_slice(v);
        f(&m)
    });
    let dec = p.model.decoder.params().to_vec();
    let idx: Vec<usize> = (0..dec.len()).collect();
    let d = finite_difference_check(&dec, &grads.decoder.values, &idx, H, FLOOR, |v| {
        let mut m = p.model.clone();
        m.decoder.params_mut().copy_from_slice(v);
        f(&m)
    });
    [e, d, 0.0]
}

pub fn fixed_gamma_suite() -> Vec<GradReport> {
    let mut out = Vec::new();
    for seed in 0..3 {
        for lik in [Likelihood::Gaussian, Likelihood::Bernoulli] {
            let p = problem(seed, lik, false);
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let g = fixed_gammas(&p, &mut rng);
            let (e, d, q) = check_all(&p, Gamma::Fixed(&g), &SemiSupConfig::unsupervised());
            out.push((format!("fixed gamma seed {seed} {lik:?}"), [e, d, q]));
        }
    }
    out
}

pub fn optimal_gamma_suite() -> Vec<GradReport> {
    (0..3)
        .map(|seed| {
            let p = problem(10 + seed, Likelihood::Gaussian, false);
            let (e, d, q) = check_all(&p, Gamma::Optimal, &SemiSupConfig::unsupervised());
            (format!("optimal gamma seed {seed}"), [e, d, q])
        })
        .collect()
}

pub fn semi_supervised_suite() -> Vec<GradReport> {
    let mut out = Vec::new();
    for seed in 0..3 {
        for delta in [0.5, 1000.0] {
            let p = problem(20 + seed, Likelihood::Gaussian, true);
            let cfg = SemiSupConfig {
                delta,
                beta_kl: 1.0,
            };
            let (e, d, q) = check_all(&p, Gamma::Optimal, &cfg);
            out.push((
                format!("semi-supervised seed {seed} delta {delta}"),
                [e, d, q],
            ));
        }
    }
    let p = problem(30, Likelihood::Gaussian, true);
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut g = fixed_gammas(&p, &mut rng);
    for (gamma, l) in g.iter_mut().zip(&p.labels) {
        fmx_core::elbo::clamp_responsibilities(gamma, l.as_ref()).unwrap();
    }
    let cfg = SemiSupConfig {
        delta: 3.0,
        beta_kl: 2.5,
    };
    let (e, d, q) = check_all(&p, Gamma::Fixed(&g), &cfg);
    out.push(("kl-weighted clamped".into(), [e, d, q]));
    out
}

pub fn vanilla_suite() -> Vec<GradReport> {
    vec![(
        "vanilla".into(),
        vanilla_errors(&problem(40, Likelihood::Bernoulli, false)),
    )]
}

pub fn worst(reports: &[GradReport]) -> f64 {
    reports
        .iter()
        .flat_map(|(_, e)| e.iter().copied())
        .fold(0.0, f64::max)
}
