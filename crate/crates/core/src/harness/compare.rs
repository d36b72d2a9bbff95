use serde::{Deserialize, Serialize};

use super::kfold::{fold_count, run_folds};
use super::{evaluate, evaluate_overlap, fold_split, mean_sd, train, Metrics, Mode, TrainConfig};
use crate::error::Result;
use crate::model::ConvNetConfig;
use crate::synthdata::Dataset;

/// Teacher, baseline and distilled student trained on the same fold split.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FoldComparison {
    pub fold: usize,
    pub eval_ids: Vec<String>,
    pub teacher: Metrics,
    pub baseline: Metrics,
    pub distilled: Metrics,
    pub baseline_overlap: f64,
    pub distilled_overlap: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Comparison {
    pub folds: Vec<FoldComparison>,
}

impl Comparison {
    fn mean(&self, pick: impl Fn(&FoldComparison) -> f64) -> f64 {
        mean_sd(&self.folds.iter().map(pick).collect::<Vec<_>>()).0
    }

    /// Mean accuracies `(teacher, baseline, distilled)`.
    pub fn accuracies(&self) -> (f64, f64, f64) {
        (
            self.mean(|f| f.teacher.accuracy),
            self.mean(|f| f.baseline.accuracy),
            self.mean(|f| f.distilled.accuracy),
        )
    }

    /// Mean overlaps `(baseline, distilled)`.
    pub fn overlaps(&self) -> (f64, f64) {
        (self.mean(|f| f.baseline_overlap), self.mean(|f| f.distilled_overlap))
    }
}

/// One teacher per fold serves both as the teacher row and as the frozen
/// teacher of the distilled student. `config.mode` is ignored.
pub fn compare(dataset: &Dataset, model_config: &ConvNetConfig, config: &TrainConfig, jobs: usize) -> Result<Comparison> {
    config.validate()?;
    let k = fold_count(dataset)?;
    let folds = run_folds(jobs, k, |fold| {
        let (train_set, eval_set) = fold_split(dataset, fold)?;
        let teacher = train(&train_set, model_config, &config.with_mode(Mode::Teacher), None)?.model;
        let baseline = train(&train_set, model_config, &config.with_mode(Mode::StudentBaseline), None)?.model;
        let distilled = train(
            &train_set,
            model_config,
            &config.with_mode(Mode::StudentDistilled),
            Some(&teacher),
        )?
        .model;
        Ok(FoldComparison {
            fold,
            eval_ids: eval_set.iter().map(|s| s.id().to_string()).collect(),
            teacher: evaluate(&teacher, &eval_set, Mode::Teacher)?,
            baseline: evaluate(&baseline, &eval_set, Mode::StudentBaseline)?,
            distilled: evaluate(&distilled, &eval_set, Mode::StudentDistilled)?,
            baseline_overlap: mean_sd(&evaluate_overlap(&baseline, &eval_set)?).0,
            distilled_overlap: mean_sd(&evaluate_overlap(&distilled, &eval_set)?).0,
        })
    })?;
    Ok(Comparison { folds })
}
