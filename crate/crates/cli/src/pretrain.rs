use std::path::PathBuf;

use anyhow::{Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tabtoken_core::prior::{pretrain, PretrainLog, PretrainSettings, PriorConfig};
use tabtoken_core::seed::derive_seed;
use tabtoken_core::{checkpoint, Model, ModelConfig};

use crate::config::write_resolved;
use crate::write_jsonl;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainRun {
    pub out: PathBuf,
    pub seed: u64,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub max_classes: usize,
    pub max_numerical: usize,
    pub episodes: usize,
    pub episodes_per_step: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    pub support_fraction: f64,
    pub heldout_episodes: usize,
    pub eval_every: usize,
    pub prior_max_features: usize,
    pub prior_max_categories: usize,
    pub prior_min_classes: usize,
    pub prior_max_classes: usize,
    pub prior_min_samples: usize,
    pub prior_max_samples: usize,
    pub prior_noise: f64,
    pub prior_missing_rate: f64,
    pub prior_weight_linear: f64,
    pub prior_weight_mlp: f64,
    pub prior_weight_categorical: f64,
    pub prior_min_class_fraction: f64,
}

impl Default for PretrainRun {
    fn default() -> Self {
        let m = ModelConfig::default();
        let p = PriorConfig::default();
        PretrainRun {
            out: PathBuf::from("runs/pretrain"),
            seed: 0,
            d_model: m.d_model,
            layers: m.layers,
            heads: m.heads,
            ff_dim: m.ff_dim,
            max_classes: m.max_classes,
            max_numerical: m.max_numerical,
            episodes: 8000,
            episodes_per_step: 4,
            lr: 1e-3,
            warmup_steps: 25,
            support_fraction: 0.7,
            heldout_episodes: 32,
            eval_every: 1000,
            prior_max_features: p.max_features,
            prior_max_categories: p.max_categories_per_column,
            prior_min_classes: p.min_classes,
            prior_max_classes: p.max_classes,
            prior_min_samples: p.min_samples,
            prior_max_samples: p.max_samples,
            prior_noise: p.noise,
            prior_missing_rate: p.missing_rate,
            prior_weight_linear: p.weight_linear,
            prior_weight_mlp: p.weight_mlp,
            prior_weight_categorical: p.weight_categorical,
            prior_min_class_fraction: p.min_class_fraction,
        }
    }
}

impl PretrainRun {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            d_model: self.d_model,
            layers: self.layers,
            heads: self.heads,
            ff_dim: self.ff_dim,
            max_classes: self.max_classes,
            max_numerical: self.max_numerical,
        }
    }

    pub fn prior(&self) -> PriorConfig {
        PriorConfig {
            max_features: self.prior_max_features,
            max_categories_per_column: self.prior_max_categories,
            min_classes: self.prior_min_classes,
            max_classes: self.prior_max_classes,
            min_samples: self.prior_min_samples,
            max_samples: self.prior_max_samples,
            noise: self.prior_noise,
            missing_rate: self.prior_missing_rate,
            weight_linear: self.prior_weight_linear,
            weight_mlp: self.prior_weight_mlp,
            weight_categorical: self.prior_weight_categorical,
            min_class_fraction: self.prior_min_class_fraction,
            seed: derive_seed(self.seed, 1),
        }
    }

    pub fn settings(&self) -> PretrainSettings {
        PretrainSettings {
            episodes: self.episodes,
            episodes_per_step: self.episodes_per_step,
            lr: self.lr,
            warmup_steps: self.warmup_steps,
            support_fraction: self.support_fraction,
            heldout_episodes: self.heldout_episodes,
            eval_every: self.eval_every,
        }
    }
}

#[derive(Serialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum LogLine<'a> {
    Episode(&'a tabtoken_core::prior::EpisodeRecord),
    Heldout(&'a tabtoken_core::prior::HeldoutRecord),
}

/// Pretrains a fresh backbone and writes `checkpoint.json`,
/// `pretrain_log.jsonl` and `config.toml` into `run.out`.
pub fn run(run: &PretrainRun) -> Result<(Model, PretrainLog)> {
    let cfg = run.model_config();
    cfg.validate()?;
    let prior = run.prior();
    prior.validate()?;
    write_resolved(&run.out, run)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(run.seed, 0));
    let mut model = Model::new(cfg, &mut rng)?;
    let log = pretrain(&mut model, &prior, &run.settings()).context("pretraining")?;
    let lines = log
        .episodes
        .iter()
        .map(LogLine::Episode)
        .chain(log.heldout.iter().map(LogLine::Heldout));
    write_jsonl(&run.out.join("pretrain_log.jsonl"), lines)?;
    checkpoint::save(&model, &run.out.join("checkpoint.json"))?;
    Ok((model, log))
}
