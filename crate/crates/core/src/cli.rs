//! Command-line front end: run configuration, subcommands and their file outputs.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{
    generate_synthetic, load_binary_images, load_labels, matched_code_accuracy, Dataset, LabelSet,
    SyntheticSpec, SyntheticTruth,
};
use crate::elbo::test_elbo_with_noise;
use crate::error::{FmxError, Result};
use crate::nets::{Activation, Architecture, Likelihood, Model, Network};
use crate::prior::{FactorialPriorState, Hyperprior};
use crate::trainer::{Metrics, TrainConfig, Trainer, METRICS_HEADER};

/// Model shape. Every field is required.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub blocks: usize,
    pub dim: usize,
    pub ks: Vec<usize>,
    pub likelihood: Likelihood,
    /// Hidden tanh layer widths of the encoder (empty for affine).
    pub encoder_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.blocks == 0 || self.dim == 0 {
            return Err(FmxError::Config(
                "model needs blocks >= 1 and dim >= 1".into(),
            ));
        }
        if self.ks.len() != self.blocks {
            return Err(FmxError::Config(format!(
                "ks has {} entries but blocks = {}",
                self.ks.len(),
                self.blocks
            )));
        }
        if self.ks.contains(&0) {
            return Err(FmxError::Config("every K_i must be >= 1".into()));
        }
        if self.encoder_hidden.contains(&0) || self.decoder_hidden.contains(&0) {
            return Err(FmxError::Config("hidden layer widths must be >= 1".into()));
        }
        Ok(())
    }

    pub fn latent_dim(&self) -> usize {
        self.blocks * self.dim
    }

    fn arch(input: usize, hidden: &[usize], output: usize) -> Architecture {
        let mut sizes = vec![input];
        sizes.extend_from_slice(hidden);
        sizes.push(output);
        let mut activations = vec![Activation::Tanh; hidden.len()];
        activations.push(Activation::Identity);
        Architecture { sizes, activations }
    }

    pub fn encoder_arch(&self, pixels: usize) -> Architecture {
        Self::arch(pixels, &self.encoder_hidden, 2 * self.latent_dim())
    }

    pub fn decoder_arch(&self, pixels: usize) -> Architecture {
        Self::arch(
            self.latent_dim(),
            &self.decoder_hidden,
            self.likelihood.decoder_outputs(pixels),
        )
    }
}

/// Where the training data comes from: a container file or an in-memory synthetic draw.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default)]
    pub train: Option<PathBuf>,
    #[serde(default)]
    pub labels: Option<PathBuf>,
    #[serde(default)]
    pub truth: Option<PathBuf>,
    #[serde(default)]
    pub synthetic: Option<SyntheticSpec>,
    /// Component counts of the synthetic generator when they differ from the model's.
    #[serde(default)]
    pub true_ks: Option<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    #[serde(default)]
    pub hyper: Hyperprior,
    pub data: DataConfig,
    #[serde(default)]
    pub train: TrainConfig,
    /// Standard deviation of the initial jitter on component means.
    #[serde(default = "default_jitter")]
    pub prior_jitter: f64,
    /// Save a checkpoint every this many iterations (0 = final only).
    #[serde(default)]
    pub checkpoint_every: u64,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    /// Image shape `[H, W]` of the data, filled in when a run starts.
    #[serde(default)]
    pub data_shape: Option<[usize; 2]>,
}

fn default_jitter() -> f64 {
    0.5
}

impl RunConfig {
    pub fn from_json(text: &str, source: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| FmxError::parse(source, e.to_string()))
    }

    /// Loads a JSON config; relative data paths are resolved against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| FmxError::io(path, e))?;
        let mut cfg = Self::from_json(&text, &path.display().to_string())?;
        let base = path.parent().unwrap_or(Path::new("."));
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(q) = p {
                if q.is_relative() {
                    *q = base.join(&*q);
                }
            }
        };
        fix(&mut cfg.data.train);
        fix(&mut cfg.data.labels);
        fix(&mut cfg.data.truth);
        fix(&mut cfg.out_dir);
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.hyper.validate()?;
        if !(self.prior_jitter >= 0.0) || !self.prior_jitter.is_finite() {
            return Err(FmxError::Config("prior_jitter must be >= 0".into()));
        }
        match (&self.data.train, &self.data.synthetic) {
            (Some(_), Some(_)) => Err(FmxError::Config(
                "data: give either `train` or `synthetic`, not both".into(),
            )),
            (None, None) => Err(FmxError::Config(
                "data: `train` or `synthetic` is required".into(),
            )),
            _ => Ok(()),
        }
    }
}

/// Loaded training inputs.
pub struct RunData {
    pub data: Dataset,
    pub labels: LabelSet,
    pub truth: Option<SyntheticTruth>,
}

pub fn load_run_data(cfg: &RunConfig) -> Result<RunData> {
    if let Some(spec) = &cfg.data.synthetic {
        let true_ks = cfg.data.true_ks.as_ref().unwrap_or(&cfg.model.ks);
        let (data, labels, truth) = generate_synthetic(true_ks, spec)?;
        // Generated labels index the generator's components and only fit a matching model.
        let labels = match &cfg.data.labels {
            Some(p) => load_labels(p, &cfg.model.ks)?,
            None if *true_ks == cfg.model.ks => labels,
            None => LabelSet::new(),
        };
        return Ok(RunData {
            data,
            labels,
            truth: Some(truth),
        });
    }
    let path = cfg.data.train.as_ref().expect("validated");
    if !path.exists() {
        return Err(FmxError::Config(format!(
            "dataset not found: {}",
            path.display()
        )));
    }
    let data = load_binary_images(path)?;
    let labels = match &cfg.data.labels {
        Some(p) => load_labels(p, &cfg.model.ks)?,
        None => LabelSet::new(),
    };
    labels.validate(data.len(), &cfg.model.ks)?;
    let truth = match &cfg.data.truth {
        Some(p) => Some(SyntheticTruth::load(p)?),
        None => None,
    };
    Ok(RunData {
        data,
        labels,
        truth,
    })
}

/// Initial networks and prior, drawn from a generator independent of the training stream.
pub fn init_state(cfg: &RunConfig, pixels: usize) -> Result<(Model, FactorialPriorState)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    rng.set_stream(1);
    let encoder = Network::init(cfg.model.encoder_arch(pixels), &mut rng)?;
    let decoder = Network::init(cfg.model.decoder_arch(pixels), &mut rng)?;
    let model = Model::new(encoder, decoder, cfg.model.likelihood)?;
    let prior = FactorialPriorState::initialize(
        cfg.model.dim,
        &cfg.model.ks,
        cfg.hyper,
        cfg.prior_jitter,
        &mut rng,
    )?;
    Ok((model, prior))
}

pub fn build_trainer(cfg: &RunConfig, run: &RunData) -> Result<Trainer> {
    cfg.validate()?;
    if cfg.model.likelihood == Likelihood::Bernoulli && !run.data.is_binary() {
        return Err(FmxError::Config(
            "Bernoulli likelihood needs binary data".into(),
        ));
    }
    let (model, prior) = init_state(cfg, run.data.dim())?;
    Trainer::new(
        cfg.train.clone(),
        model,
        prior,
        run.data.clone(),
        run.labels.clone(),
    )
}

pub struct TrainSummary {
    pub first: Option<Metrics>,
    pub last: Option<Metrics>,
    pub checkpoint: PathBuf,
}

/// Runs (or resumes) training, writing `metrics.csv` and checkpoints into `out`.
pub fn train_run(cfg: &RunConfig, out: &Path, resume: Option<&Path>) -> Result<TrainSummary> {
    cfg.validate()?;
    let run = load_run_data(cfg)?;
    let mut echo = cfg.clone();
    echo.data_shape = Some([run.data.height(), run.data.width()]);
    let echo_json = echo.to_json();
    fs::create_dir_all(out).map_err(|e| FmxError::io(out, e))?;
    fs::write(out.join("config.json"), &echo_json).map_err(|e| FmxError::io(out, e))?;

    let mut trainer = match resume {
        None => build_trainer(cfg, &run)?,
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            Trainer::from_state(
                cfg.train.clone(),
                ck.state,
                run.data.clone(),
                run.labels.clone(),
            )?
        }
    };

    let metrics_path = out.join("metrics.csv");
    let mut csv = String::from(METRICS_HEADER);
    csv.push('\n');
    if resume.is_some() {
        if let Ok(old) = fs::read_to_string(&metrics_path) {
            for line in old.lines().skip(1) {
                let keep = line
                    .split(',')
                    .next()
                    .and_then(|s| s.parse::<u64>().ok())
                    .is_some_and(|it| it < trainer.iter());
                if keep {
                    csv.push_str(line);
                    csv.push('\n');
                }
            }
        }
    }

    let mut first = None;
    let mut last = None;
    let every = cfg.checkpoint_every;
    trainer.run(|m, t| {
        if !(m.elbo.is_finite() && m.recon.is_finite()) {
            return Err(FmxError::Numeric(format!(
                "non-finite metrics at iteration {}",
                m.iter
            )));
        }
        csv.push_str(&m.csv_row());
        csv.push('\n');
        first.get_or_insert(*m);
        last = Some(*m);
        if every > 0 && t.iter() % every == 0 {
            let ck = Checkpoint {
                state: t.state(),
                config_json: echo_json.clone(),
            };
            ck.save(&out.join(format!("checkpoint_{:08}.fmxc", t.iter())))?;
        }
        Ok(())
    })?;
    fs::write(&metrics_path, &csv).map_err(|e| FmxError::io(&metrics_path, e))?;
    let checkpoint = out.join("checkpoint.fmxc");
    Checkpoint {
        state: trainer.state(),
        config_json: echo_json,
    }
    .save(&checkpoint)?;
    Ok(TrainSummary {
        first,
        last,
        checkpoint,
    })
}

/// Per-datum predictive bound terms.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub recon: f64,
    pub kl_z: f64,
    pub kl_r: f64,
    pub bound: f64,
    pub code: Vec<usize>,
}

pub fn evaluate(
    model: &Model,
    prior: &FactorialPriorState,
    data: &Dataset,
    n_samples: usize,
    seed: u64,
) -> Result<Vec<EvalRow>> {
    if n_samples == 0 {
        return Err(FmxError::Config("need at least one sample".into()));
    }
    if model.data_dim() != data.dim() {
        return Err(FmxError::Shape {
            what: "checkpoint data dimension vs dataset",
            expected: model.data_dim(),
            actual: data.dim(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let latent = model.latent_dim();
    let eps: Vec<Vec<Vec<f64>>> = (0..data.len())
        .map(|_| {
            (0..n_samples)
                .map(|_| {
                    (0..latent)
                        .map(|_| StandardNormal.sample(&mut rng))
                        .collect()
                })
                .collect()
        })
        .collect();
    data.rows()
        .par_iter()
        .zip(eps.par_iter())
        .map(|(x, e)| {
            let t = test_elbo_with_noise(x, model, prior, e)?;
            Ok(EvalRow {
                recon: t.recon,
                kl_z: t.kl_z,
                kl_r: t.kl_r,
                bound: t.bound,
                code: t.gamma.argmax(),
            })
        })
        .collect()
}

/// Column means `(recon, kl_z, kl_r, bound)`.
pub fn eval_means(rows: &[EvalRow]) -> [f64; 4] {
    let n = rows.len().max(1) as f64;
    let mut s = [0.0; 4];
    for r in rows {
        s[0] += r.recon;
        s[1] += r.kl_z;
        s[2] += r.kl_r;
        s[3] += r.bound;
    }
    s.map(|v| v / n)
}

pub const EVAL_HEADER: &str = "n,recon,kl_z,kl_r,bound";

pub fn eval_csv(rows: &[EvalRow]) -> String {
    let mut s = String::from(EVAL_HEADER);
    s.push('\n');
    for (n, r) in rows.iter().enumerate() {
        let _ = writeln!(
            s,
            "{n},{:e},{:e},{:e},{:e}",
            r.recon, r.kl_z, r.kl_r, r.bound
        );
    }
    let m = eval_means(rows);
    let _ = writeln!(s, "mean,{:e},{:e},{:e},{:e}", m[0], m[1], m[2], m[3]);
    s
}

/// Argmax-code accuracy per true block, maximized over block matchings and relabelings.
pub fn code_accuracy(rows: &[EvalRow], truth: &SyntheticTruth, ks: &[usize]) -> Vec<f64> {
    let pred: Vec<Vec<usize>> = rows.iter().map(|r| r.code.clone()).collect();
    matched_code_accuracy(&pred, &truth.codes, ks, &truth.ks)
}

/// Parses `"i=k,…"` with 1-based indices into a per-block clamp list.
pub fn parse_clamp(text: &str, ks: &[usize]) -> Result<Vec<Option<usize>>> {
    let mut out = vec![None; ks.len()];
    for part in text.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let (i, k) = part
            .split_once('=')
            .ok_or_else(|| FmxError::Config(format!("clamp entry `{part}` is not i=k")))?;
        let parse = |s: &str| {
            s.trim()
                .parse::<usize>()
                .map_err(|e| FmxError::Config(format!("clamp entry `{part}`: {e}")))
        };
        let (i, k) = (parse(i)?, parse(k)?);
        if i == 0 || i > ks.len() {
            return Err(FmxError::Index {
                what: "clamped block (1-based)",
                index: i,
                limit: ks.len(),
            });
        }
        if k == 0 || k > ks[i - 1] {
            return Err(FmxError::Index {
                what: "clamped component (1-based)",
                index: k,
                limit: ks[i - 1],
            });
        }
        out[i - 1] = Some(k - 1);
    }
    Ok(out)
}

/// Binary P5 graymap of values in `[lo, hi]`.
pub fn graymap(values: &[f64], height: usize, width: usize, lo: f64, hi: f64) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    let span = if hi > lo { hi - lo } else { 1.0 };
    out.extend(
        values
            .iter()
            .map(|&v| (((v - lo) / span).clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    out
}

pub struct SampleOutput {
    pub codes: Vec<Vec<usize>>,
    pub images: Vec<Vec<f64>>,
}

pub fn sample_images(
    model: &Model,
    prior: &FactorialPriorState,
    clamp: &[Option<usize>],
    count: usize,
    seed: u64,
) -> Result<SampleOutput> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut codes = Vec::with_capacity(count);
    let mut images = Vec::with_capacity(count);
    for _ in 0..count {
        let code = prior.sample_code_clamped(clamp, &mut rng)?;
        let z = prior.sample_latent(&code, &mut rng)?;
        images.push(model.decode_mean(&z)?);
        codes.push(code.k);
    }
    Ok(SampleOutput { codes, images })
}

/// One row of a K sweep, averaged over seeds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SweepRow {
    pub k: usize,
    pub recon: f64,
    pub kl_z: f64,
    pub kl_r: f64,
    pub bound: f64,
}

/// Trains one model per `K` (all blocks set to `K`) and seed, and averages the predictive bound terms.
pub fn sweep_k(cfg: &RunConfig, k_list: &[usize], seeds: &[u64]) -> Result<Vec<SweepRow>> {
    if k_list.is_empty() || seeds.is_empty() {
        return Err(FmxError::Config(
            "sweep needs a K list and at least one seed".into(),
        ));
    }
    let mut rows = Vec::with_capacity(k_list.len());
    for &k in k_list {
        let mut acc = [0.0; 4];
        for &seed in seeds {
            let mut c = cfg.clone();
            c.model.ks = vec![k; c.model.blocks];
            c.train.seed = seed;
            c.validate()?;
            let run = load_run_data(&c)?;
            let mut trainer = build_trainer(&c, &run)?;
            trainer.run(|_, _| Ok(()))?;
            let eval = evaluate(trainer.model(), trainer.prior(), &run.data, 1, seed)?;
            let m = eval_means(&eval);
            for j in 0..4 {
                acc[j] += m[j] / seeds.len() as f64;
            }
        }
        rows.push(SweepRow {
            k,
            recon: acc[0],
            kl_z: acc[1],
            kl_r: acc[2],
            bound: acc[3],
        });
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenConfig {
    pub ks: Vec<usize>,
    pub spec: SyntheticSpec,
}

#[derive(Parser, Debug)]
#[command(name = "fmx", about = "Factorial mixture-prior VAE")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model: pretrain, prior initialization, joint phase.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Resume from this checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Per-datum predictive bound terms for a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset container; defaults to the training data named in the checkpoint.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Decode samples from the prior, optionally with clamped component indices.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 16)]
        count: usize,
        /// Comma-separated `i=k` pairs, 1-based.
        #[arg(long)]
        clamp: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model per K and tabulate the predictive bound terms.
    SweepK {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',')]
        k_list: Vec<usize>,
        #[arg(long, value_delimiter = ',')]
        seed: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a synthetic factorial dataset, its labels and its generative record.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| FmxError::io(path, e))
}

fn mkdir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| FmxError::io(path, e))
}

fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train {
            config,
            seed,
            out,
            checkpoint,
        } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            let out = out
                .or_else(|| cfg.out_dir.clone())
                .unwrap_or_else(|| PathBuf::from("fmx-out"));
            let summary = train_run(&cfg, &out, checkpoint.as_deref())?;
            if let (Some(a), Some(b)) = (summary.first, summary.last) {
                println!("elbo first {:e} last {:e}", a.elbo, b.elbo);
            }
            println!("checkpoint {}", summary.checkpoint.display());
        }
        Command::Eval {
            checkpoint,
            data,
            config,
            count,
            seed,
            out,
        } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let cfg = match config {
                Some(p) => RunConfig::load(&p)?,
                None => RunConfig::from_json(&ck.config_json, "checkpoint config")?,
            };
            let (dataset, truth) = match data {
                Some(p) => {
                    if !p.exists() {
                        return Err(FmxError::Config(format!(
                            "dataset not found: {}",
                            p.display()
                        )));
                    }
                    (load_binary_images(&p)?, None)
                }
                None => {
                    let run = load_run_data(&cfg)?;
                    (run.data, run.truth)
                }
            };
            let rows = evaluate(&ck.state.model, &ck.state.prior, &dataset, count, seed)?;
            mkdir(&out)?;
            write(&out.join("eval.csv"), eval_csv(&rows))?;
            let ks = ck.state.prior.ks();
            let mut codes = String::from("n");
            for i in 0..ks.len() {
                let _ = write!(codes, ",k{}", i + 1);
            }
            codes.push('\n');
            for (n, r) in rows.iter().enumerate() {
                let _ = write!(codes, "{n}");
                for k in &r.code {
                    let _ = write!(codes, ",{}", k + 1);
                }
                codes.push('\n');
            }
            write(&out.join("codes.csv"), codes)?;
            let m = eval_means(&rows);
            println!(
                "mean recon {:e} kl_z {:e} kl_r {:e} bound {:e}",
                m[0], m[1], m[2], m[3]
            );
            if let Some(t) = truth.filter(|t| t.codes.len() == rows.len()) {
                for (i, a) in code_accuracy(&rows, &t, &ks).iter().enumerate() {
                    println!("block {} code accuracy {a:.4}", i + 1);
                }
            }
        }
        Command::Sample {
            checkpoint,
            count,
            clamp,
            seed,
            out,
        } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let cfg = RunConfig::from_json(&ck.config_json, "checkpoint config")?;
            let ks = ck.state.prior.ks();
            let clamp = parse_clamp(clamp.as_deref().unwrap_or(""), &ks)?;
            let s = sample_images(&ck.state.model, &ck.state.prior, &clamp, count, seed)?;
            let pixels = ck.state.model.data_dim();
            let [h, w] = cfg.data_shape.unwrap_or([1, pixels]);
            mkdir(&out)?;
            let mut codes = String::from("index");
            for i in 0..ks.len() {
                let _ = write!(codes, ",k{}", i + 1);
            }
            codes.push('\n');
            for (j, (code, img)) in s.codes.iter().zip(&s.images).enumerate() {
                let (lo, hi) = match ck.state.model.likelihood {
                    Likelihood::Bernoulli => (0.0, 1.0),
                    Likelihood::Gaussian => img
                        .iter()
                        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| {
                            (a.min(v), b.max(v))
                        }),
                };
                write(
                    &out.join(format!("sample_{j:05}.pgm")),
                    graymap(img, h, w, lo, hi),
                )?;
                let _ = write!(codes, "{j}");
                for k in code {
                    let _ = write!(codes, ",{}", k + 1);
                }
                codes.push('\n');
            }
            write(&out.join("codes.csv"), codes)?;
        }
        Command::SweepK {
            config,
            k_list,
            seed,
            out,
        } => {
            let cfg = RunConfig::load(&config)?;
            let seeds = if seed.is_empty() {
                vec![cfg.train.seed]
            } else {
                seed
            };
            let rows = sweep_k(&cfg, &k_list, &seeds)?;
            mkdir(&out)?;
            let mut s = String::from("k,recon,kl_z,kl_r,bound\n");
            for r in &rows {
                let _ = writeln!(
                    s,
                    "{},{:e},{:e},{:e},{:e}",
                    r.k, r.recon, r.kl_z, r.kl_r, r.bound
                );
            }
            write(&out.join("sweep.csv"), &s)?;
            print!("{s}");
        }
        Command::GenData { config, seed, out } => {
            let text = fs::read_to_string(&config).map_err(|e| FmxError::io(&config, e))?;
            let mut gen: GenConfig = serde_json::from_str(&text)
                .map_err(|e| FmxError::parse(config.display(), e.to_string()))?;
            if let Some(s) = seed {
                gen.spec.seed = s;
            }
            let (data, labels, truth) = generate_synthetic(&gen.ks, &gen.spec)?;
            mkdir(&out)?;
            data.save(&out.join("data.fmxb"))?;
            labels.save(&out.join("labels.txt"))?;
            truth.save(&out.join("truth.fmxt"))?;
            println!("wrote {} data points to {}", data.len(), out.display());
        }
    }
    Ok(())
}

/// Exit code for an error: 3 for numeric failures, 2 otherwise.
pub fn exit_code(err: &FmxError) -> i32 {
    match err {
        FmxError::Numeric(_) => 3,
        _ => 2,
    }
}

/// Caps the worker pool at `FMX_THREADS` when set.
pub fn configure_threads() {
    if let Some(n) = std::env::var("FMX_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
    {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
}

/// Parses arguments, runs the command, and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    configure_threads();
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
