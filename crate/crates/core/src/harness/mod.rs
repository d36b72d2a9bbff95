//! Training loops, optimizer, metrics and k-fold evaluation.

mod compare;
mod kfold;
mod metrics;
mod optim;
mod train;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossWeights;

pub use compare::{compare, Comparison, FoldComparison};
pub use kfold::{check_no_leakage, fold_split, kfold_run, FoldResult, KFoldReport};
pub use metrics::{mean_sd, ClassMetrics, Metrics};
pub use optim::{Optimizer, OptimizerKind, ADAM_BETA1, ADAM_BETA2, ADAM_EPS, SGD_MOMENTUM};
pub use train::{
    center, distill_inputs, evaluate, evaluate_overlap, model_input, train, write_log_csv, EpochLog, TrainOutcome,
    INPUT_CENTER, LOG_HEADER,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Cropped images, classification loss only.
    Teacher,
    /// Full images, classification loss only.
    StudentBaseline,
    /// Full images, composite loss against a frozen teacher.
    StudentDistilled,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Teacher => "teacher",
            Mode::StudentBaseline => "student-baseline",
            Mode::StudentDistilled => "student-distilled",
        }
    }

    pub fn uses_crops(self) -> bool {
        self == Mode::Teacher
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub loss_weights: LossWeights,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub mode: Mode,
    pub folds: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            loss_weights: LossWeights::default(),
            epochs: 30,
            batch_size: 8,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            seed: 0,
            mode: Mode::StudentDistilled,
            folds: 5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss_weights.validate()?;
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if self.folds < 2 {
            return Err(Error::Config(format!("need at least 2 folds, got {}", self.folds)));
        }
        Ok(())
    }

    /// Weights actually used: teacher and baseline runs train on the
    /// classification term alone.
    pub fn effective_weights(&self) -> LossWeights {
        match self.mode {
            Mode::StudentDistilled => self.loss_weights,
            Mode::Teacher | Mode::StudentBaseline => LossWeights {
                temperature: self.loss_weights.temperature,
                ..LossWeights::classification_only()
            },
        }
    }

    /// Same hyperparameters in another mode.
    pub fn with_mode(&self, mode: Mode) -> Self {
        TrainConfig { mode, ..self.clone() }
    }
}
