use fmx_core::cli::{DataConfig, ModelConfig, RunConfig};
use fmx_core::data::{DecoderChoice, SyntheticSpec};
use fmx_core::elbo::SemiSupConfig;
use fmx_core::nets::Likelihood;
use fmx_core::prior::Hyperprior;
use fmx_core::trainer::{AdamConfig, PriorOptimizer, Schedule, TrainConfig};

/// Two blocks of four components, separation 6, N = 2000, affine decoder, 3000 joint
/// iterations: the structure-recovery setting.
pub fn structure_config(seed: u64, label_fraction: f64) -> RunConfig {
    let labeled = label_fraction > 0.0;
    RunConfig {
        model: ModelConfig {
            blocks: 2,
            dim: 1,
            ks: vec![4, 4],
            likelihood: Likelihood::Gaussian,
            encoder_hidden: vec![32],
            decoder_hidden: vec![],
        },
        hyper: Hyperprior::default(),
        data: DataConfig {
            synthetic: Some(SyntheticSpec {
                blocks: 2,
                dim: 1,
                n: 2000,
                separation: 6.0,
                noise_std: 1.0,
                obs_std: 0.1,
                decoder: DecoderChoice::Affine { out_dim: 8 },
                label_fraction,
                seed,
            }),
            ..DataConfig::default()
        },
        train: TrainConfig {
            pretrain_iters: 1000,
            prior_init_iters: 200,
            joint_iters: 3000,
            batch_size: 64,
            seed,
            semi: SemiSupConfig {
                delta: if labeled { 1000.0 } else { 0.0 },
                beta_kl: 1.0,
            },
            schedule: Schedule {
                kappa: 0.52,
                tau0: 1.0,
                rho_floor: 0.0,
            },
            adam: AdamConfig {
                lr: 3e-2,
                ..AdamConfig::default()
            },
            seed_prior_from_data: true,
            prior_optimizer: PriorOptimizer::Sgd,
            prior_lr: labeled.then_some(1e-7),
            ..TrainConfig::default()
        },
        prior_jitter: 0.5,
        checkpoint_every: 0,
        out_dir: None,
        data_shape: None,
    }
}

/// A small run that finishes in about a second.
pub fn small_config(seed: u64) -> RunConfig {
    let mut cfg = structure_config(seed, 0.0);
    if let Some(s) = cfg.data.synthetic.as_mut() {
        s.n = 300;
        s.label_fraction = 0.3;
    }
    cfg.model.encoder_hidden = vec![8];
    cfg.train = TrainConfig {
        pretrain_iters: 20,
        prior_init_iters: 20,
        joint_iters: 30,
        batch_size: 32,
        seed,
        semi: SemiSupConfig {
            delta: 10.0,
            beta_kl: 1.0,
        },
        schedule: Schedule {
            kappa: 0.7,
            tau0: 1.0,
            rho_floor: 0.0,
        },
        adam: AdamConfig {
            lr: 1e-2,
            ..AdamConfig::default()
        },
        prior_lr: Some(1e-5),
        ..TrainConfig::default()
    };
    cfg
}

/// Data from two blocks of eight components; the model's K is set per sweep entry.
pub fn sweep_config(seed: u64) -> RunConfig {
    let mut cfg = structure_config(seed, 0.0);
    cfg.model.ks = vec![8, 8];
    cfg.data.true_ks = Some(vec![8, 8]);
    cfg
}
