//! Optional TOML config file. Precedence: flags, then file, then defaults.
//!
//! ```toml
//! [data]
//! samples_per_class = 100
//! noise = 0.05
//! distractors = 3
//! folds = 5
//! clinical_proportions = false
//! seed = 0
//!
//! [train]
//! mode = "student-distilled"
//! alpha = 0.01
//! beta = 0.8
//! theta = 0.2
//! temperature = 3.0
//! epochs = 30
//! batch_size = 8
//! learning_rate = 0.001
//! optimizer = "adam"
//! seed = 0
//!
//! [experiment]
//! seeds = [0, 1, 2]
//! jobs = 1
//! ```

use std::fs;
use std::path::Path;

use clap::Args;
use serde::Deserialize;

use crate::error::{Error, Result};
use crate::harness::{Mode, OptimizerKind, TrainConfig};
use crate::synthdata::SynthConfig;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub experiment: ExperimentSection,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub samples_per_class: Option<usize>,
    pub noise: Option<f64>,
    pub distractors: Option<usize>,
    pub folds: Option<usize>,
    pub clinical_proportions: Option<bool>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub mode: Option<Mode>,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub theta: Option<f64>,
    pub temperature: Option<f64>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
    pub optimizer: Option<OptimizerKind>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    pub seeds: Option<Vec<u64>>,
    pub jobs: Option<usize>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(FileConfig::default());
        };
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

/// Dataset flags shared by `gen-data` and `experiment`.
#[derive(Debug, Clone, Default, Args)]
pub struct DataFlags {
    #[arg(long)]
    pub samples_per_class: Option<usize>,
    /// Standard deviation of the Gaussian pixel noise.
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub distractors: Option<usize>,
    #[arg(long)]
    pub folds: Option<usize>,
    /// Rescale class counts to the clinical stage distribution.
    #[arg(long)]
    pub clinical_proportions: bool,
}

impl DataFlags {
    pub fn resolve(&self, file: &DataSection, seed: u64) -> SynthConfig {
        let d = SynthConfig::default();
        SynthConfig {
            samples_per_class: self.samples_per_class.or(file.samples_per_class).unwrap_or(d.samples_per_class),
            noise_sigma: self.noise.or(file.noise).unwrap_or(d.noise_sigma),
            distractor_count: self.distractors.or(file.distractors).unwrap_or(d.distractor_count),
            folds: self.folds.or(file.folds).unwrap_or(d.folds),
            clinical_proportions: self.clinical_proportions || file.clinical_proportions.unwrap_or(d.clinical_proportions),
            master_seed: seed,
            ..d
        }
    }
}

/// Optimization and loss flags shared by `train` and `experiment`.
#[derive(Debug, Clone, Default, Args)]
pub struct TrainFlags {
    /// Attention-loss weight.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Distillation-loss weight.
    #[arg(long)]
    pub beta: Option<f64>,
    /// Classification-loss weight.
    #[arg(long)]
    pub theta: Option<f64>,
    /// Distillation temperature.
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long = "lr")]
    pub learning_rate: Option<f64>,
    #[arg(long, value_enum)]
    pub optimizer: Option<OptimizerKind>,
}

impl TrainFlags {
    pub fn resolve(&self, file: &TrainSection, mode: Mode, seed: u64, folds: usize) -> TrainConfig {
        let d = TrainConfig::default();
        let w = d.loss_weights;
        TrainConfig {
            loss_weights: crate::losses::LossWeights {
                alpha: self.alpha.or(file.alpha).unwrap_or(w.alpha),
                beta: self.beta.or(file.beta).unwrap_or(w.beta),
                theta: self.theta.or(file.theta).unwrap_or(w.theta),
                temperature: self.temperature.or(file.temperature).unwrap_or(w.temperature),
            },
            epochs: self.epochs.or(file.epochs).unwrap_or(d.epochs),
            batch_size: self.batch_size.or(file.batch_size).unwrap_or(d.batch_size),
            learning_rate: self.learning_rate.or(file.learning_rate).unwrap_or(d.learning_rate),
            optimizer: self.optimizer.or(file.optimizer).unwrap_or(d.optimizer),
            seed,
            mode,
            folds,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_beat_file_beat_defaults() {
        let file: FileConfig = toml::from_str("[train]\nalpha = 0.5\nbeta = 0.25\n").unwrap();
        let flags = TrainFlags {
            alpha: Some(0.75),
            ..Default::default()
        };
        let cfg = flags.resolve(&file.train, Mode::StudentDistilled, 3, 5);
        assert_eq!(cfg.loss_weights.alpha, 0.75);
        assert_eq!(cfg.loss_weights.beta, 0.25);
        assert_eq!(cfg.loss_weights.theta, 0.2);
        assert_eq!(cfg.seed, 3);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<FileConfig>("[train]\nalpah = 1.0\n").is_err());
    }
}
