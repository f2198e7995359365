//! Optimization loop: vanilla pretraining, prior initialization, joint training.

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec::{ByteReader, ByteWriter};
use crate::data::{Dataset, LabelSet};
use crate::elbo::{
    clamp_responsibilities, train_elbo, vanilla_elbo, BatchItem, ElboBreakdown, SemiSupConfig,
};
use crate::error::{check_len, FmxError, Result};
use crate::nets::Model;
use crate::prior::{EncoderOutput, FactorialPriorState, PriorGradient, Responsibilities};

/// Robbins-Monro step sizes `ρ_τ = max(floor, (τ0 + τ)^(−κ))`, clipped to 1.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    pub kappa: f64,
    pub tau0: f64,
    #[serde(default)]
    pub rho_floor: f64,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            kappa: 0.52,
            tau0: 2000.0,
            rho_floor: 0.0,
        }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.kappa > 0.5 && self.kappa <= 1.0) {
            return Err(FmxError::Config(format!(
                "kappa = {} outside (0.5, 1]",
                self.kappa
            )));
        }
        if !(self.tau0 >= 0.0) || !self.tau0.is_finite() {
            return Err(FmxError::Config(format!(
                "tau0 = {} must be >= 0",
                self.tau0
            )));
        }
        if !(self.rho_floor >= 0.0 && self.rho_floor <= 1.0) {
            return Err(FmxError::Config(format!(
                "rho_floor = {} outside [0, 1]",
                self.rho_floor
            )));
        }
        Ok(())
    }

    pub fn rho(&self, tau: u64) -> Result<f64> {
        rho(self, tau)
    }
}

pub fn rho(schedule: &Schedule, tau: u64) -> Result<f64> {
    let base = schedule.tau0 + tau as f64;
    if !(base >= 1.0) {
        return Err(FmxError::Domain(format!(
            "tau0 + tau = {base} < 1 gives a step size above 1"
        )));
    }
    Ok(base.powf(-schedule.kappa).max(schedule.rho_floor).min(1.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0;
        if !ok {
            return Err(FmxError::Config(format!("invalid Adam settings {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(len: usize, cfg: &AdamConfig) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            epsilon: cfg.epsilon,
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    pub fn encode(&self, w: &mut ByteWriter) {
        w.u64(self.step);
        w.f64s(&[self.lr, self.beta1, self.beta2, self.epsilon]);
        w.f64_vec(&self.m);
        w.f64_vec(&self.v);
    }

    pub fn decode(r: &mut ByteReader<'_>) -> Result<Self> {
        let step = r.u64("adam step")?;
        let h = r.f64s(4, "adam settings")?;
        let m = r.f64_vec("adam first moment")?;
        let v = r.f64_vec("adam second moment")?;
        if m.len() != v.len() {
            return Err(r.error("adam moment lengths differ"));
        }
        Ok(Self {
            m,
            v,
            step,
            lr: h[0],
            beta1: h[1],
            beta2: h[2],
            epsilon: h[3],
        })
    }
}

/// One bias-corrected Adam step minimizing a loss with gradient `grads`.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState) -> Result<()> {
    check_len("adam parameters", state.len(), params.len())?;
    check_len("adam gradients", state.len(), grads.len())?;
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    for j in 0..params.len() {
        let g = grads[j];
        state.m[j] = state.beta1 * state.m[j] + (1.0 - state.beta1) * g;
        state.v[j] = state.beta2 * state.v[j] + (1.0 - state.beta2) * g * g;
        let m_hat = state.m[j] / c1;
        let v_hat = state.v[j] / c2;
        params[j] -= state.lr * m_hat / (v_hat.sqrt() + state.epsilon);
    }
    Ok(())
}

/// Optimizer for prior factors that receive classification gradients.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PriorOptimizer {
    #[default]
    Sgd,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default)]
    pub pretrain_iters: u64,
    #[serde(default = "default_prior_init_iters")]
    pub prior_init_iters: u64,
    #[serde(default)]
    pub joint_iters: u64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub semi: SemiSupConfig,
    /// Final KL weight; `None` keeps `semi.beta_kl` constant.
    #[serde(default)]
    pub beta_kl_end: Option<f64>,
    /// Joint iterations over which the KL weight moves linearly to `beta_kl_end`.
    #[serde(default)]
    pub beta_kl_decay_iters: u64,
    #[serde(default)]
    pub schedule: Schedule,
    /// Separate schedule for the prior initialization phase; defaults to `schedule`.
    #[serde(default)]
    pub prior_init_schedule: Option<Schedule>,
    #[serde(default)]
    pub adam: AdamConfig,
    /// Pretraining iterations over which the KL weight ramps 0 → 1; defaults to the whole phase.
    #[serde(default)]
    pub anneal_iters: Option<u64>,
    /// Start prior initialization from hard k-means assignments of encoded data instead of the
    /// jittered hyperprior.
    #[serde(default)]
    pub seed_prior_from_data: bool,
    /// Never update `q(ξ)` (it stays at its initial value).
    #[serde(default)]
    pub freeze_prior: bool,
    #[serde(default)]
    pub prior_optimizer: PriorOptimizer,
    /// Learning rate of the labeled-factor path; defaults to `adam.lr`.
    #[serde(default)]
    pub prior_lr: Option<f64>,
}

fn default_batch_size() -> usize {
    64
}

fn default_prior_init_iters() -> u64 {
    2000
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            pretrain_iters: 0,
            prior_init_iters: default_prior_init_iters(),
            joint_iters: 0,
            batch_size: default_batch_size(),
            seed: 0,
            semi: SemiSupConfig::default(),
            beta_kl_end: None,
            beta_kl_decay_iters: 0,
            schedule: Schedule::default(),
            prior_init_schedule: None,
            adam: AdamConfig::default(),
            anneal_iters: None,
            seed_prior_from_data: false,
            freeze_prior: false,
            prior_optimizer: PriorOptimizer::default(),
            prior_lr: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, n_total: usize) -> Result<()> {
        if self.batch_size == 0 {
            return Err(FmxError::Config("batch_size must be >= 1".into()));
        }
        if self.batch_size > n_total {
            return Err(FmxError::Config(format!(
                "batch_size {} exceeds dataset size {n_total}",
                self.batch_size
            )));
        }
        self.semi.validate()?;
        if let Some(end) = self.beta_kl_end {
            SemiSupConfig {
                delta: self.semi.delta,
                beta_kl: end,
            }
            .validate()?;
        }
        self.schedule.validate()?;
        if let Some(s) = &self.prior_init_schedule {
            s.validate()?;
        }
        self.adam.validate()?;
        if let Some(lr) = self.prior_lr {
            if !(lr > 0.0) || !lr.is_finite() {
                return Err(FmxError::Config(format!("prior_lr = {lr} must be > 0")));
            }
        }
        Ok(())
    }

    pub fn total_iters(&self) -> u64 {
        self.pretrain_iters + self.prior_init_iters + self.joint_iters
    }

    /// KL weight at joint iteration `tau`.
    pub fn beta_kl_at(&self, tau: u64) -> f64 {
        match self.beta_kl_end {
            None => self.semi.beta_kl,
            Some(end) => {
                if self.beta_kl_decay_iters == 0 {
                    return end;
                }
                let f = (tau as f64 / self.beta_kl_decay_iters as f64).min(1.0);
                self.semi.beta_kl + f * (end - self.semi.beta_kl)
            }
        }
    }

    /// Pretraining KL weight at pretrain iteration `t`.
    pub fn anneal_at(&self, t: u64) -> f64 {
        let span = self.anneal_iters.unwrap_or(self.pretrain_iters);
        if span <= 1 {
            return 1.0;
        }
        (t as f64 / (span - 1) as f64).min(1.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Pretrain,
    PriorInit,
    Joint,
    Done,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Pretrain => "pretrain",
            Phase::PriorInit => "prior_init",
            Phase::Joint => "joint",
            Phase::Done => "done",
        }
    }
}

/// One metrics row per iteration.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub iter: u64,
    pub phase: Phase,
    pub elbo: f64,
    pub recon: f64,
    pub kl_z: f64,
    pub kl_r: f64,
    pub kl_global: f64,
    pub rho: f64,
    pub semi_sup_loss: f64,
}

pub const METRICS_HEADER: &str = "iter,phase,elbo,recon,kl_z,kl_r,kl_global,rho,semi_sup_loss";

impl Metrics {
    /// CSV row; floats use Rust's shortest round-trip formatting.
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:e},{:e},{:e},{:e},{:e},{:e},{:e}",
            self.iter,
            self.phase.name(),
            self.elbo,
            self.recon,
            self.kl_z,
            self.kl_r,
            self.kl_global,
            self.rho,
            self.semi_sup_loss
        )
    }

    fn from_breakdown(iter: u64, phase: Phase, b: &ElboBreakdown, rho: f64) -> Self {
        Self {
            iter,
            phase,
            elbo: b.total,
            recon: b.recon,
            kl_z: b.kl_z,
            kl_r: b.kl_r,
            kl_global: b.kl_global_ng + b.kl_global_dir,
            rho,
            semi_sup_loss: -b.class_log_lik,
        }
    }
}

/// Serializable generator position: seed, stream and word position.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }

    pub fn encode(&self, w: &mut ByteWriter) {
        w.bytes(&self.seed);
        w.u64(self.stream);
        w.u128(self.word_pos);
    }

    pub fn decode(r: &mut ByteReader<'_>) -> Result<Self> {
        let mut seed = [0u8; 32];
        seed.copy_from_slice(r.take(32, "rng seed")?);
        Ok(Self {
            seed,
            stream: r.u64("rng stream")?,
            word_pos: r.u128("rng position")?,
        })
    }
}

/// Everything that evolves during training.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub model: Model,
    pub prior: FactorialPriorState,
    pub adam_encoder: AdamState,
    pub adam_decoder: AdamState,
    /// Present when the labeled-factor path uses Adam.
    pub adam_prior: Option<AdamState>,
    pub iter: u64,
    pub rng: RngState,
}

pub struct Trainer {
    config: TrainConfig,
    data: Dataset,
    labels: LabelSet,
    labeled_blocks: Vec<bool>,
    model: Model,
    prior: FactorialPriorState,
    adam_encoder: AdamState,
    adam_decoder: AdamState,
    adam_prior: Option<AdamState>,
    iter: u64,
    rng: ChaCha8Rng,
}

impl Trainer {
    /// Fresh trainer; the generator is seeded from `config.seed`.
    pub fn new(
        config: TrainConfig,
        model: Model,
        prior: FactorialPriorState,
        data: Dataset,
        labels: LabelSet,
    ) -> Result<Self> {
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        let state = TrainState {
            adam_encoder: AdamState::new(model.encoder.params().len(), &config.adam),
            adam_decoder: AdamState::new(model.decoder.params().len(), &config.adam),
            adam_prior: None,
            model,
            prior,
            iter: 0,
            rng: RngState::capture(&rng),
        };
        Self::from_state(config, state, data, labels)
    }

    pub fn from_state(
        config: TrainConfig,
        state: TrainState,
        data: Dataset,
        labels: LabelSet,
    ) -> Result<Self> {
        config.validate(data.len())?;
        check_len(
            "data dimension vs model",
            state.model.data_dim(),
            data.dim(),
        )?;
        check_len(
            "model latent size vs prior",
            state.prior.latent_dim(),
            state.model.latent_dim(),
        )?;
        check_len(
            "encoder optimizer state",
            state.model.encoder.params().len(),
            state.adam_encoder.len(),
        )?;
        check_len(
            "decoder optimizer state",
            state.model.decoder.params().len(),
            state.adam_decoder.len(),
        )?;
        labels.validate(data.len(), &state.prior.ks())?;
        let labeled_blocks = labels.labeled_blocks(state.prior.blocks());
        Ok(Self {
            config,
            data,
            labels,
            labeled_blocks,
            model: state.model,
            prior: state.prior,
            adam_encoder: state.adam_encoder,
            adam_decoder: state.adam_decoder,
            adam_prior: state.adam_prior,
            iter: state.iter,
            rng: state.rng.restore(),
        })
    }

    pub fn state(&self) -> TrainState {
        TrainState {
            model: self.model.clone(),
            prior: self.prior.clone(),
            adam_encoder: self.adam_encoder.clone(),
            adam_decoder: self.adam_decoder.clone(),
            adam_prior: self.adam_prior.clone(),
            iter: self.iter,
            rng: RngState::capture(&self.rng),
        }
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn prior(&self) -> &FactorialPriorState {
        &self.prior
    }

    pub fn data(&self) -> &Dataset {
        &self.data
    }

    pub fn labels(&self) -> &LabelSet {
        &self.labels
    }

    pub fn iter(&self) -> u64 {
        self.iter
    }

    /// Replaces `q(ξ)`, e.g. to pin it at a chosen value.
    pub fn set_prior(&mut self, prior: FactorialPriorState) -> Result<()> {
        check_len(
            "prior latent size",
            self.model.latent_dim(),
            prior.latent_dim(),
        )?;
        self.prior = prior;
        self.labeled_blocks = self.labels.labeled_blocks(self.prior.blocks());
        Ok(())
    }

    pub fn phase(&self) -> Phase {
        let c = &self.config;
        if self.iter < c.pretrain_iters {
            Phase::Pretrain
        } else if self.iter < c.pretrain_iters + c.prior_init_iters {
            Phase::PriorInit
        } else if self.iter < c.total_iters() {
            Phase::Joint
        } else {
            Phase::Done
        }
    }

    /// Iteration index within the current phase.
    pub fn phase_iter(&self) -> u64 {
        let c = &self.config;
        match self.phase() {
            Phase::Pretrain => self.iter,
            Phase::PriorInit => self.iter - c.pretrain_iters,
            Phase::Joint | Phase::Done => self.iter - c.pretrain_iters - c.prior_init_iters,
        }
    }

    /// Runs one iteration of the current phase; `None` once all phases are done.
    pub fn step(&mut self) -> Result<Option<Metrics>> {
        let m = match self.phase() {
            Phase::Pretrain => self.pretrain_step()?,
            Phase::PriorInit => self.prior_init_step()?,
            Phase::Joint => self.joint_step()?,
            Phase::Done => return Ok(None),
        };
        Ok(Some(m))
    }

    /// Runs to completion, handing every metrics row to `sink`.
    pub fn run<F: FnMut(&Metrics, &Trainer) -> Result<()>>(&mut self, mut sink: F) -> Result<()> {
        while let Some(m) = self.step()? {
            sink(&m, self)?;
        }
        Ok(())
    }

    fn draw_batch(&mut self) -> (Vec<usize>, Vec<Vec<f64>>) {
        let idx = sample_indices(&mut self.rng, self.data.len(), self.config.batch_size).into_vec();
        let latent = self.model.latent_dim();
        let eps = (0..idx.len())
            .map(|_| {
                (0..latent)
                    .map(|_| StandardNormal.sample(&mut self.rng))
                    .collect()
            })
            .collect();
        (idx, eps)
    }

    fn encode_batch(&self, idx: &[usize]) -> Result<Vec<EncoderOutput>> {
        idx.par_iter()
            .map(|&n| self.model.encode_x(self.data.row(n)))
            .collect()
    }

    fn e_step(&self, idx: &[usize], encs: &[EncoderOutput]) -> Result<Vec<Responsibilities>> {
        idx.par_iter()
            .zip(encs.par_iter())
            .map(|(&n, enc)| {
                let mut g = self.prior.responsibilities(enc)?;
                clamp_responsibilities(&mut g, self.labels.get(n))?;
                Ok(g)
            })
            .collect()
    }

    /// One Adam step on the `N(0, I)`-prior objective with an annealed KL weight.
    pub fn pretrain_step(&mut self) -> Result<Metrics> {
        let t = self.phase_iter();
        let anneal = self.config.anneal_at(t);
        let (idx, eps) = self.draw_batch();
        let xs: Vec<&[f64]> = idx.iter().map(|&n| self.data.row(n)).collect();
        let (b, grads) = vanilla_elbo(&self.model, &xs, &eps, self.data.len(), anneal)?;
        self.apply_network_step(&grads.encoder.values, &grads.decoder.values)?;
        let m = Metrics {
            iter: self.iter,
            phase: Phase::Pretrain,
            elbo: b.recon - b.kl,
            recon: b.recon,
            kl_z: b.kl,
            kl_r: 0.0,
            kl_global: 0.0,
            rho: 0.0,
            semi_sup_loss: 0.0,
        };
        self.iter += 1;
        Ok(m)
    }

    fn apply_network_step(&mut self, enc_ascent: &[f64], dec_ascent: &[f64]) -> Result<()> {
        let enc_loss: Vec<f64> = enc_ascent.iter().map(|g| -g).collect();
        let dec_loss: Vec<f64> = dec_ascent.iter().map(|g| -g).collect();
        adam_step(
            self.model.encoder.params_mut(),
            &enc_loss,
            &mut self.adam_encoder,
        )?;
        adam_step(
            self.model.decoder.params_mut(),
            &dec_loss,
            &mut self.adam_decoder,
        )?;
        Ok(())
    }

    /// Sets `q(ξ)` to the full natural step taken on hard per-block k-means assignments of
    /// an encoded pool of data points.
    fn seed_prior(&mut self) -> Result<()> {
        let pool = sample_indices(
            &mut self.rng,
            self.data.len(),
            self.data.len().min(SEED_POOL),
        );
        let encs = self.encode_batch(&pool.into_vec())?;
        let dim = self.prior.dim();
        let ks = self.prior.ks();
        let mut assign = vec![Vec::with_capacity(ks.len()); encs.len()];
        for (i, &kk) in ks.iter().enumerate() {
            let points: Vec<&[f64]> = encs
                .iter()
                .map(|e| &e.mu()[i * dim..(i + 1) * dim])
                .collect();
            let mut best: Option<(f64, Vec<Vec<f64>>)> = None;
            for _ in 0..SEED_RESTARTS {
                let (inertia, centers) = kmeans(&points, kk, &mut self.rng);
                if best.as_ref().is_none_or(|(b, _)| inertia < *b) {
                    best = Some((inertia, centers));
                }
            }
            let (_, centers) = best.expect("at least one restart");
            for (n, p) in points.iter().enumerate() {
                let mut one_hot = vec![0.0; kk];
                one_hot[nearest(&centers, p).0] = 1.0;
                assign[n].push(one_hot);
            }
        }
        let resps = assign
            .into_iter()
            .map(Responsibilities::new)
            .collect::<Result<Vec<_>>>()?;
        self.prior = self
            .prior
            .natural_step(&encs, &resps, self.data.len(), 1.0)?;
        Ok(())
    }

    /// E-step followed by a natural-gradient step on `λ`; `θ` and `φ` are left untouched.
    pub fn prior_init_step(&mut self) -> Result<Metrics> {
        let t = self.phase_iter();
        let schedule = self
            .config
            .prior_init_schedule
            .unwrap_or(self.config.schedule);
        let rho = schedule.rho(t)?;
        if t == 0 && self.config.seed_prior_from_data && !self.config.freeze_prior {
            self.seed_prior()?;
        }
        let (idx, eps) = self.draw_batch();
        let encs = self.encode_batch(&idx)?;
        let resps = self.e_step(&idx, &encs)?;
        let breakdown = self.breakdown(&idx, &eps, &resps, self.config.semi)?;
        if !self.config.freeze_prior {
            self.prior = self
                .prior
                .natural_step(&encs, &resps, self.data.len(), rho)?;
        }
        let m = Metrics::from_breakdown(self.iter, Phase::PriorInit, &breakdown, rho);
        self.iter += 1;
        Ok(m)
    }

    fn breakdown(
        &self,
        idx: &[usize],
        eps: &[Vec<f64>],
        resps: &[Responsibilities],
        semi: SemiSupConfig,
    ) -> Result<ElboBreakdown> {
        let items = self.items(idx, eps, resps);
        Ok(train_elbo(
            &self.model,
            &self.prior,
            &items,
            self.data.len(),
            &semi,
            false,
        )?
        .0)
    }

    fn items<'a>(
        &'a self,
        idx: &[usize],
        eps: &'a [Vec<f64>],
        resps: &'a [Responsibilities],
    ) -> Vec<BatchItem<'a>> {
        idx.iter()
            .zip(eps)
            .zip(resps)
            .map(|((&n, e), g)| BatchItem {
                x: self.data.row(n),
                eps: e,
                gamma: g,
                labels: self.labels.get(n),
            })
            .collect()
    }

    /// E-step, Adam step on `(θ, φ)` with `γ` fixed, re-encoding, then the `λ` update.
    pub fn joint_step(&mut self) -> Result<Metrics> {
        let tau = self.phase_iter();
        let rho = self.config.schedule.rho(tau)?;
        let semi = SemiSupConfig {
            delta: self.config.semi.delta,
            beta_kl: self.config.beta_kl_at(tau),
        };
        let (idx, eps) = self.draw_batch();
        let encs = self.encode_batch(&idx)?;
        let resps = self.e_step(&idx, &encs)?;

        let supervised =
            semi.delta > 0.0 && self.labeled_blocks.iter().any(|&b| b) && !self.config.freeze_prior;
        let (breakdown, grads) = {
            let items = self.items(&idx, &eps, &resps);
            train_elbo(
                &self.model,
                &self.prior,
                &items,
                self.data.len(),
                &semi,
                supervised,
            )?
        };
        self.apply_network_step(&grads.encoder.values, &grads.decoder.values)?;

        if !self.config.freeze_prior {
            let encs = self.encode_batch(&idx)?;
            let resps = self.e_step(&idx, &encs)?;
            let frozen: Vec<bool> = if supervised {
                self.labeled_blocks.clone()
            } else {
                vec![false; self.prior.blocks()]
            };
            let mut next =
                self.prior
                    .natural_step_masked(&encs, &resps, self.data.len(), rho, &frozen)?;
            if supervised {
                let g = grads.prior.as_ref().expect("prior gradient requested");
                next = self.labeled_factor_step(next, g)?;
            }
            self.prior = next;
        }

        let m = Metrics::from_breakdown(self.iter, Phase::Joint, &breakdown, rho);
        self.iter += 1;
        Ok(m)
    }

    /// First-order step in log-mean parameters for blocks that carry labels.
    fn labeled_factor_step(
        &mut self,
        base: FactorialPriorState,
        grad: &PriorGradient,
    ) -> Result<FactorialPriorState> {
        let lr = self.config.prior_lr.unwrap_or(self.config.adam.lr);
        let mut restricted = PriorGradient::zeros(&self.prior);
        for (i, &on) in self.labeled_blocks.iter().enumerate() {
            if on {
                restricted.m[i].clone_from(&grad.m[i]);
                restricted.log_s[i].clone_from(&grad.log_s[i]);
                restricted.log_a[i].clone_from(&grad.log_a[i]);
                restricted.log_b[i].clone_from(&grad.log_b[i]);
                restricted.log_c[i].clone_from(&grad.log_c[i]);
            }
        }
        // The gradient is taken at the pre-step prior, so apply it to the labeled blocks of
        // the old state and keep the natural-gradient result for the rest.
        let (step, step_lr) = match self.config.prior_optimizer {
            PriorOptimizer::Sgd => (restricted, lr),
            PriorOptimizer::Adam => {
                let flat = flatten(&restricted);
                let state = self.adam_prior.get_or_insert_with(|| {
                    AdamState::new(
                        flat.len(),
                        &AdamConfig {
                            lr,
                            ..self.config.adam
                        },
                    )
                });
                let mut delta = vec![0.0; flat.len()];
                let loss: Vec<f64> = flat.iter().map(|g| -g).collect();
                adam_step(&mut delta, &loss, state)?;
                (unflatten(&delta, &restricted), 1.0)
            }
        };
        let moved = self.prior.ascend(&step, step_lr, &self.labeled_blocks)?;
        merge_blocks(base, &moved, &self.labeled_blocks)
    }
}

const SEED_POOL: usize = 1024;
const SEED_RESTARTS: usize = 10;
const LLOYD_ITERS: usize = 50;

fn sq_dist(p: &[f64], c: &[f64]) -> f64 {
    p.iter().zip(c).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of and squared distance to the closest center.
fn nearest(centers: &[Vec<f64>], p: &[f64]) -> (usize, f64) {
    centers
        .iter()
        .enumerate()
        .map(|(j, c)| (j, sq_dist(p, c)))
        .fold((0, f64::INFINITY), |a, b| if b.1 < a.1 { b } else { a })
}

/// k-means++ seeding followed by Lloyd iterations; returns `(inertia, centers)`.
fn kmeans<R: Rng + ?Sized>(points: &[&[f64]], k: usize, rng: &mut R) -> (f64, Vec<Vec<f64>>) {
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(k);
    centers.push(points[rng.random_range(0..points.len())].to_vec());
    while centers.len() < k {
        let d2: Vec<f64> = points
            .iter()
            .map(|p| {
                centers
                    .iter()
                    .map(|c| sq_dist(p, c))
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let u = rng.random::<f64>() * total;
            let mut acc = 0.0;
            d2.iter()
                .position(|&w| {
                    acc += w;
                    u < acc
                })
                .unwrap_or(points.len() - 1)
        } else {
            rng.random_range(0..points.len())
        };
        centers.push(points[pick].to_vec());
    }
    let dim = points[0].len();
    for _ in 0..LLOYD_ITERS {
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for p in points {
            let (j, _) = nearest(&centers, p);
            counts[j] += 1;
            for (s, x) in sums[j].iter_mut().zip(p.iter()) {
                *s += x;
            }
        }
        let mut moved = false;
        for j in 0..k {
            if counts[j] == 0 {
                continue;
            }
            let c: Vec<f64> = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            moved |= c != centers[j];
            centers[j] = c;
        }
        if !moved {
            break;
        }
    }
    let inertia = points.iter().map(|p| nearest(&centers, p).1).sum();
    (inertia, centers)
}

fn flatten(g: &PriorGradient) -> Vec<f64> {
    let mut out = Vec::new();
    for i in 0..g.m.len() {
        out.extend(&g.m[i]);
        out.extend(&g.log_s[i]);
        out.extend(&g.log_a[i]);
        out.extend(&g.log_b[i]);
        out.extend(&g.log_c[i]);
    }
    out
}

fn unflatten(flat: &[f64], like: &PriorGradient) -> PriorGradient {
    let mut out = like.clone();
    let mut pos = 0;
    let mut fill = |v: &mut Vec<f64>| {
        let n = v.len();
        v.copy_from_slice(&flat[pos..pos + n]);
        pos += n;
    };
    for i in 0..out.m.len() {
        fill(&mut out.m[i]);
        fill(&mut out.log_s[i]);
        fill(&mut out.log_a[i]);
        fill(&mut out.log_b[i]);
        fill(&mut out.log_c[i]);
    }
    out
}

/// Takes the blocks with `mask[i]` from `from`, the rest from `base`.
fn merge_blocks(
    base: FactorialPriorState,
    from: &FactorialPriorState,
    mask: &[bool],
) -> Result<FactorialPriorState> {
    let mut components = Vec::with_capacity(base.blocks());
    let mut mixings = Vec::with_capacity(base.blocks());
    for i in 0..base.blocks() {
        let src = if mask[i] { from } else { &base };
        components.push(
            (0..src.ks()[i])
                .map(|k| src.component(i, k).clone())
                .collect(),
        );
        mixings.push(src.mixing(i).clone());
    }
    FactorialPriorState::from_parts(base.dim(), components, mixings, *base.hyper())
}
