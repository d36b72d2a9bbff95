use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{evaluate, evaluate_overlap, mean_sd, train, EpochLog, Metrics, Mode, TrainConfig};
use crate::error::{Error, Result};
use crate::model::ConvNetConfig;
use crate::synthdata::{Dataset, SynthSample};

/// Train and evaluation samples for one fold.
pub fn fold_split(dataset: &Dataset, fold: usize) -> Result<(Vec<&SynthSample>, Vec<&SynthSample>)> {
    let mut train = Vec::new();
    let mut eval = Vec::new();
    for s in &dataset.samples {
        match s.entry.fold {
            None => return Err(Error::Config(format!("sample {} has no fold label", s.id()))),
            Some(f) if f == fold => eval.push(s),
            Some(_) => train.push(s),
        }
    }
    check_no_leakage(&train, &eval)?;
    Ok((train, eval))
}

/// Fails if any sample id appears on both sides.
pub fn check_no_leakage(train: &[&SynthSample], eval: &[&SynthSample]) -> Result<()> {
    let ids: BTreeSet<&str> = train.iter().map(|s| s.id()).collect();
    match eval.iter().find(|s| ids.contains(s.id())) {
        Some(s) => Err(Error::Contract(format!("sample {} is in both train and eval splits", s.id()))),
        None => Ok(()),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub eval_ids: Vec<String>,
    pub metrics: Metrics,
    /// Mean overlap of true-class heatmaps with ROI masks; student modes only.
    pub overlap: Option<f64>,
    /// Metrics of the fold's own teacher on crops; distilled mode only.
    pub teacher_metrics: Option<Metrics>,
    pub log: Vec<EpochLog>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KFoldReport {
    pub mode: Mode,
    pub folds: Vec<FoldResult>,
}

impl KFoldReport {
    pub fn accuracy(&self) -> (f64, f64) {
        mean_sd(&self.folds.iter().map(|f| f.metrics.accuracy).collect::<Vec<_>>())
    }

    /// Mean and sd of one metric picked by `pick`.
    pub fn summary(&self, pick: fn(&Metrics) -> f64) -> (f64, f64) {
        mean_sd(&self.folds.iter().map(|f| pick(&f.metrics)).collect::<Vec<_>>())
    }

    pub fn mean_overlap(&self) -> Option<f64> {
        let v: Option<Vec<f64>> = self.folds.iter().map(|f| f.overlap).collect();
        v.map(|v| mean_sd(&v).0)
    }
}

pub(crate) fn fold_count(dataset: &Dataset) -> Result<usize> {
    let mut max = None;
    for s in &dataset.samples {
        let f = s
            .entry
            .fold
            .ok_or_else(|| Error::Config(format!("sample {} has no fold label", s.id())))?;
        max = max.max(Some(f));
    }
    max.map(|m| m + 1).ok_or_else(|| Error::Contract("dataset is empty".into()))
}

pub(crate) fn run_folds<T: Send>(jobs: usize, k: usize, job: impl Fn(usize) -> Result<T> + Sync) -> Result<Vec<T>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    pool.install(|| (0..k).into_par_iter().map(&job).collect())
}

/// Trains and evaluates one model per fold. Distilled mode first trains the
/// fold's teacher on the same training folds. Results are ordered by fold.
pub fn kfold_run(dataset: &Dataset, model_config: &ConvNetConfig, config: &TrainConfig, jobs: usize) -> Result<KFoldReport> {
    config.validate()?;
    let k = fold_count(dataset)?;
    if k != config.folds {
        return Err(Error::Config(format!(
            "dataset has {k} folds, training config asks for {}",
            config.folds
        )));
    }
    let folds = run_folds(jobs, k, |fold| {
        let (train_set, eval_set) = fold_split(dataset, fold)?;
        let (teacher, teacher_metrics) = if config.mode == Mode::StudentDistilled {
            let t = train(&train_set, model_config, &config.with_mode(Mode::Teacher), None)?.model;
            let m = evaluate(&t, &eval_set, Mode::Teacher)?;
            (Some(t), Some(m))
        } else {
            (None, None)
        };
        let outcome = train(&train_set, model_config, config, teacher.as_ref())?;
        let metrics = evaluate(&outcome.model, &eval_set, config.mode)?;
        let overlap = if config.mode.uses_crops() {
            None
        } else {
            Some(mean_sd(&evaluate_overlap(&outcome.model, &eval_set)?).0)
        };
        Ok(FoldResult {
            fold,
            eval_ids: eval_set.iter().map(|s| s.id().to_string()).collect(),
            metrics,
            overlap,
            teacher_metrics,
            log: outcome.log,
        })
    })?;
    Ok(KFoldReport { mode: config.mode, folds })
}
