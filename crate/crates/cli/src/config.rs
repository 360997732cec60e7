//! Flat TOML config files. Every key is optional and falls back to the
//! library default; unknown keys are rejected.

use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use learncert::data::BlobSpec;
use learncert::nn::TrainConfig;
use learncert::pue::{CraftConfig, OfflineConfig};
use serde::de::DeserializeOwned;
use serde::Deserialize;

pub fn read_toml<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            toml::from_str(&text).with_context(|| format!("invalid config {}", p.display()))
        }
    }
}

/// Blob benchmark description for `gen-data`.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataFile {
    pub classes: Option<usize>,
    pub dim: Option<usize>,
    pub train_per_class: Option<usize>,
    pub test_per_class: Option<usize>,
    /// Per-coordinate cluster standard deviation, in [0, 1] pixel units.
    pub spread: Option<f64>,
    /// Half-width of the box the class centers are drawn from.
    pub center_spread: Option<f64>,
    pub seed: Option<u64>,
}

impl DataFile {
    pub fn blob_spec(&self, fallback_seed: u64) -> BlobSpec {
        let d = BlobSpec::default();
        BlobSpec {
            classes: self.classes.unwrap_or(d.classes),
            dim: self.dim.unwrap_or(d.dim),
            train_per_class: self.train_per_class.unwrap_or(d.train_per_class),
            test_per_class: self.test_per_class.unwrap_or(d.test_per_class),
            spread: self.spread.unwrap_or(d.spread),
            center_spread: self.center_spread.unwrap_or(d.center_spread),
            seed: self.seed.unwrap_or(fallback_seed),
        }
    }
}

/// Training and crafting knobs shared by `craft` and `train-surrogate`.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageFile {
    // SGD
    pub learning_rate: Option<f64>,
    pub momentum: Option<f64>,
    pub batch_size: Option<usize>,
    pub weight_decay: Option<f64>,
    // crafting
    pub u_train: Option<usize>,
    /// Weight-noise standard deviation cap S and ramp step s.
    pub sigma_max: Option<f64>,
    pub sigma_step: Option<f64>,
    pub surrogate_steps: Option<usize>,
    pub stop_error: Option<f64>,
    pub warmup_error: Option<f64>,
    /// Signed step for the noise, in [0, 1] pixel units.
    pub step_size: Option<f64>,
    /// l-inf budget in [0, 1] pixel units (8/255 = 0.0314).
    pub budget: Option<f64>,
    pub max_rounds: Option<usize>,
    pub validation_fraction: Option<f64>,
    // offline surrogate
    pub target_error: Option<f64>,
    pub noise_draws: Option<usize>,
    pub max_epochs: Option<usize>,
}

impl StageFile {
    pub fn train_config(&self, seed: u64) -> TrainConfig {
        let d = TrainConfig::default();
        TrainConfig {
            learning_rate: self.learning_rate.unwrap_or(d.learning_rate),
            momentum: self.momentum.unwrap_or(d.momentum),
            batch_size: self.batch_size.unwrap_or(d.batch_size),
            steps: d.steps,
            weight_decay: self.weight_decay.unwrap_or(d.weight_decay),
            seed,
        }
    }

    pub fn craft_config(&self, base: CraftConfig) -> CraftConfig {
        let budget = self.budget.unwrap_or(base.budget);
        CraftConfig {
            u_train: self.u_train.unwrap_or(base.u_train),
            sigma_max: self.sigma_max.unwrap_or(base.sigma_max),
            sigma_step: self.sigma_step.unwrap_or(base.sigma_step),
            surrogate_steps: self.surrogate_steps.unwrap_or(base.surrogate_steps),
            stop_error: self.stop_error.unwrap_or(base.stop_error),
            warmup_error: self.warmup_error.unwrap_or(base.warmup_error),
            // the default step follows the budget
            step_size: self.step_size.unwrap_or(budget / 10.0),
            budget,
            max_rounds: self.max_rounds.unwrap_or(base.max_rounds),
            validation_fraction: self.validation_fraction.unwrap_or(base.validation_fraction),
            ..base
        }
    }

    pub fn offline_config(&self) -> OfflineConfig {
        let d = OfflineConfig::default();
        OfflineConfig {
            sigma_max: self.sigma_max.unwrap_or(d.sigma_max),
            sigma_step: self.sigma_step.unwrap_or(d.sigma_step),
            u_train: self.u_train.unwrap_or(d.u_train),
            target_error: self.target_error.unwrap_or(d.target_error),
            noise_draws: self.noise_draws.unwrap_or(d.noise_draws),
            max_epochs: self.max_epochs.unwrap_or(d.max_epochs),
        }
    }
}
