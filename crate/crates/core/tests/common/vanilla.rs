//! Stand-alone vanilla VAE (tanh MLPs, Bernoulli pixels, `N(0, I)` prior) trained with Adam.

use fmx_core::data::{Dataset, LabelSet};
use fmx_core::elbo::SemiSupConfig;
use fmx_core::expfam::{DirichletFactor, NormalGammaFactor};
use fmx_core::nets::{Architecture, Likelihood, Model, Network};
use fmx_core::prior::{FactorialPriorState, Hyperprior};
use fmx_core::trainer::{AdamConfig, TrainConfig, Trainer};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::normal;

struct Mlp {
    n_in: usize,
    n_hid: usize,
    n_out: usize,
    /// `[W1 (hid×in), b1, W2 (out×hid), b2]`
    p: Vec<f64>,
}

struct Pass {
    h: Vec<f64>,
    out: Vec<f64>,
}

impl Mlp {
    fn w1(&self, o: usize, c: usize) -> f64 {
        self.p[o * self.n_in + c]
    }
    fn b1_at(&self) -> usize {
        self.n_hid * self.n_in
    }
    fn w2_at(&self) -> usize {
        self.b1_at() + self.n_hid
    }
    fn b2_at(&self) -> usize {
        self.w2_at() + self.n_out * self.n_hid
    }

    fn forward(&self, x: &[f64]) -> Pass {
        let h: Vec<f64> = (0..self.n_hid)
            .map(|o| {
                let mut s = self.p[self.b1_at() + o];
                for (c, xc) in x.iter().enumerate() {
                    s += self.w1(o, c) * xc;
                }
                s.tanh()
            })
            .collect();
        let out = (0..self.n_out)
            .map(|o| {
                let mut s = self.p[self.b2_at() + o];
                for (c, hc) in h.iter().enumerate() {
                    s += self.p[self.w2_at() + o * self.n_hid + c] * hc;
                }
                s
            })
            .collect();
        Pass { h, out }
    }

    /// Adds `∂J/∂p` into `g` for output adjoint `d_out`; returns `∂J/∂x`.
    fn backward(&self, x: &[f64], pass: &Pass, d_out: &[f64], g: &mut [f64]) -> Vec<f64> {
        let mut d_h = vec![0.0; self.n_hid];
        for o in 0..self.n_out {
            g[self.b2_at() + o] += d_out[o];
            for c in 0..self.n_hid {
                g[self.w2_at() + o * self.n_hid + c] += d_out[o] * pass.h[c];
                d_h[c] += self.p[self.w2_at() + o * self.n_hid + c] * d_out[o];
            }
        }
        let mut d_x = vec![0.0; self.n_in];
        for o in 0..self.n_hid {
            let d_pre = d_h[o] * (1.0 - pass.h[o] * pass.h[o]);
            g[self.b1_at() + o] += d_pre;
            for c in 0..self.n_in {
                g[o * self.n_in + c] += d_pre * x[c];
                d_x[c] += self.w1(o, c) * d_pre;
            }
        }
        d_x
    }
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn step(&mut self, p: &mut [f64], ascent: &[f64], cfg: &AdamConfig) {
        self.t += 1;
        for j in 0..p.len() {
            let g = -ascent[j];
            self.m[j] = cfg.beta1 * self.m[j] + (1.0 - cfg.beta1) * g;
            self.v[j] = cfg.beta2 * self.v[j] + (1.0 - cfg.beta2) * g * g;
            let mh = self.m[j] / (1.0 - cfg.beta1.powi(self.t));
            let vh = self.v[j] / (1.0 - cfg.beta2.powi(self.t));
            p[j] -= cfg.lr * mh / (vh.sqrt() + cfg.epsilon);
        }
    }
}

fn sigmoid(l: f64) -> f64 {
    1.0 / (1.0 + (-l).exp())
}

pub struct Reduction {
    /// Worst absolute parameter difference after each step.
    pub per_step: Vec<f64>,
    /// Largest parameter movement of the reference run, to show the steps are not trivial.
    pub movement: f64,
}

/// Runs `steps` joint iterations of the factorial trainer with `I = 1`, `K = 1`, `q(ξ)` pinned
/// at the standard-normal limit and `Δ = 0`, next to the stand-alone reference.
pub fn vanilla_reduction(seed: u64, steps: u64) -> Reduction {
    let (pixels, hidden, latent, n, batch) = (9, 8, 3, 120, 16);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            (0..pixels)
                .map(|_| f64::from(normal(&mut rng) > 0.3))
                .collect()
        })
        .collect();
    let data = Dataset::new(rows, 3, 3).unwrap();
    let encoder = Network::init(
        Architecture::tanh_hidden(pixels, hidden, 2 * latent),
        &mut rng,
    )
    .unwrap();
    let decoder =
        Network::init(Architecture::tanh_hidden(latent, hidden, pixels), &mut rng).unwrap();
    let model = Model::new(encoder, decoder, Likelihood::Bernoulli).unwrap();
    let prior = FactorialPriorState::from_parts(
        latent,
        vec![vec![NormalGammaFactor::broadcast(
            latent, 0.0, 1e12, 1e6, 1e6,
        )
        .unwrap()]],
        vec![DirichletFactor::symmetric(1, 1.0).unwrap()],
        Hyperprior::default(),
    )
    .unwrap();
    let adam = AdamConfig {
        lr: 1e-2,
        ..AdamConfig::default()
    };
    let cfg = TrainConfig {
        pretrain_iters: 0,
        prior_init_iters: 0,
        joint_iters: steps,
        batch_size: batch,
        seed,
        semi: SemiSupConfig::unsupervised(),
        adam,
        freeze_prior: true,
        ..TrainConfig::default()
    };

    let mut enc = Mlp {
        n_in: pixels,
        n_hid: hidden,
        n_out: 2 * latent,
        p: model.encoder.params().to_vec(),
    };
    let mut dec = Mlp {
        n_in: latent,
        n_hid: hidden,
        n_out: pixels,
        p: model.decoder.params().to_vec(),
    };
    let (enc0, dec0) = (enc.p.clone(), dec.p.clone());
    let mut trainer = Trainer::new(cfg, model, prior, data.clone(), LabelSet::new()).unwrap();

    let mut ref_rng = ChaCha8Rng::seed_from_u64(seed);
    let mut adam_e = Adam {
        m: vec![0.0; enc.p.len()],
        v: vec![0.0; enc.p.len()],
        t: 0,
    };
    let mut adam_d = Adam {
        m: vec![0.0; dec.p.len()],
        v: vec![0.0; dec.p.len()],
        t: 0,
    };
    let scale = n as f64 / batch as f64;
    let mut per_step = Vec::new();
    for _ in 0..steps {
        let idx = sample(&mut ref_rng, n, batch).into_vec();
        let eps: Vec<Vec<f64>> = (0..batch)
            .map(|_| (0..latent).map(|_| normal(&mut ref_rng)).collect())
            .collect();
        let mut ge = vec![0.0; enc.p.len()];
        let mut gd = vec![0.0; dec.p.len()];
        for (&row, e) in idx.iter().zip(&eps) {
            let x = data.row(row);
            let pe = enc.forward(x);
            let (mu, lv) = pe.out.split_at(latent);
            let z: Vec<f64> = (0..latent)
                .map(|j| mu[j] + (0.5 * lv[j]).exp() * e[j])
                .collect();
            let pd = dec.forward(&z);
            let d_logits: Vec<f64> = (0..pixels)
                .map(|p| scale * (x[p] - sigmoid(pd.out[p])))
                .collect();
            let dz = dec.backward(&z, &pd, &d_logits, &mut gd);
            let mut d_out = vec![0.0; 2 * latent];
            for j in 0..latent {
                d_out[j] = dz[j] - scale * mu[j];
                d_out[latent + j] =
                    dz[j] * e[j] * 0.5 * (0.5 * lv[j]).exp() - scale * 0.5 * (lv[j].exp() - 1.0);
            }
            enc.backward(x, &pe, &d_out, &mut ge);
        }
        adam_e.step(&mut enc.p, &ge, &adam);
        adam_d.step(&mut dec.p, &gd, &adam);

        trainer.step().unwrap();
        let m = trainer.model();
        let worst = m
            .encoder
            .params()
            .iter()
            .zip(&enc.p)
            .chain(m.decoder.params().iter().zip(&dec.p))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        per_step.push(worst);
    }
    let movement = enc0
        .iter()
        .zip(&enc.p)
        .chain(dec0.iter().zip(&dec.p))
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    Reduction { per_step, movement }
}
