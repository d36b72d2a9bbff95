use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::config::{DataFlags, FileConfig, TrainFlags};
use super::manifest::Recorder;
use super::{CliError, Command};
use crate::error::{Error, Result};
use crate::gradcam::{overlap_score, student_attention, write_pgm};
use crate::gradcheck::suite;
use crate::harness::{self, center, fold_split, mean_sd, Comparison, Metrics, Mode, TrainConfig};
use crate::model::{CheckpointManifest, ConvClassifier, ConvNetConfig};
use crate::synthdata::{self, Dataset, SynthConfig, SynthSample};

pub const METRICS_HEADER: [&str; 7] = ["model", "split", "n", "Acc (%)", "Prec (%)", "Rec (%)", "F1 (%)"];

/// Minimum teacher accuracy the experiment requires.
pub const TEACHER_FLOOR: f64 = 0.95;
/// Minimum distilled-minus-baseline accuracy gap.
pub const ACCURACY_GAP: f64 = 0.02;
/// Minimum distilled-minus-baseline overlap gap.
pub const OVERLAP_GAP: f64 = 0.10;

pub(super) fn dispatch(command: Command) -> Result<(), CliError> {
    match command {
        Command::GenData { out, seed, data, config } => gen_data(&out, seed, &data, config.as_deref()),
        Command::Train {
            data,
            out,
            mode,
            teacher,
            fold,
            seed,
            train,
            config,
        } => train_cmd(&data, &out, mode, teacher.as_deref(), fold, seed, &train, config.as_deref()),
        Command::Eval {
            checkpoint,
            data,
            fold,
            complement,
            out,
        } => eval_cmd(&checkpoint, &data, fold, complement, &out),
        Command::Gradcheck {
            op,
            configurations,
            out,
            inject_bug,
        } => gradcheck_cmd(op.as_deref(), configurations, &out, inject_bug.as_deref()),
        Command::Heatmap {
            models,
            data,
            samples,
            fold,
            limit,
            out,
        } => heatmap_cmd(&models, &data, &samples, fold, limit, &out),
        Command::Experiment {
            out,
            seeds,
            jobs,
            data,
            train,
            config,
        } => experiment_cmd(&out, seeds, jobs, &data, &train, config.as_deref()).map(|_| ()),
    }
}

fn model_config_for(dataset: &Dataset) -> ConvNetConfig {
    let (h, w) = dataset.image_size();
    ConvNetConfig {
        input_shape: (1, h, w),
        ..ConvNetConfig::default()
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Corrupt(format!("{}: {other:?}", path.display())),
    })?;
    w.write_record(header)?;
    for row in rows {
        w.write_record(row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").map_err(|e| Error::io(path, e))
}

fn pct(v: f64) -> String {
    format!("{:.2}", 100.0 * v)
}

fn metrics_row(model: &str, split: &str, m: &Metrics) -> Vec<String> {
    vec![
        model.to_string(),
        split.to_string(),
        m.total().to_string(),
        pct(m.accuracy),
        pct(m.precision),
        pct(m.recall),
        pct(m.f1),
    ]
}

fn gen_data(out: &Path, seed: Option<u64>, flags: &DataFlags, config: Option<&Path>) -> Result<(), CliError> {
    let file = FileConfig::load(config)?;
    let seed = seed.or(file.data.seed).unwrap_or(0);
    let cfg = flags.resolve(&file.data, seed);
    cfg.validate()?;
    let mut rec = Recorder::start("gen-data", &cfg, vec![seed])?;
    if let Some(c) = config {
        rec.input(c);
    }
    let dataset = synthdata::generate(&cfg, out)?;
    rec.finish(out, &[out.to_path_buf()])?;
    println!("wrote {} samples to {}", dataset.samples.len(), out.display());
    Ok(())
}

#[derive(Serialize)]
struct TrainRun<'a> {
    train: &'a TrainConfig,
    data: &'a Path,
    teacher: Option<&'a Path>,
    held_out_fold: Option<usize>,
}

fn select(dataset: &Dataset, fold: Option<usize>, complement: bool) -> Result<Vec<&SynthSample>> {
    match fold {
        None => Ok(dataset.samples.iter().collect()),
        Some(f) => {
            let (rest, held) = fold_split(dataset, f)?;
            let picked = if complement { rest } else { held };
            if picked.is_empty() {
                return Err(Error::Config(format!("fold {f} selects no samples")));
            }
            Ok(picked)
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn train_cmd(
    data: &Path,
    out: &Path,
    mode: Option<Mode>,
    teacher: Option<&Path>,
    fold: Option<usize>,
    seed: Option<u64>,
    flags: &TrainFlags,
    config: Option<&Path>,
) -> Result<(), CliError> {
    let file = FileConfig::load(config)?;
    let mode = mode.or(file.train.mode).unwrap_or(TrainConfig::default().mode);
    match (mode, teacher) {
        (Mode::StudentDistilled, None) => {
            return Err(CliError::Usage("--mode student-distilled needs --teacher <CHECKPOINT>".into()))
        }
        (Mode::Teacher | Mode::StudentBaseline, Some(_)) => {
            return Err(CliError::Usage(format!("--teacher only applies to student-distilled, not {}", mode.as_str())))
        }
        _ => {}
    }
    let seed = seed.or(file.train.seed).unwrap_or(0);
    let dataset = synthdata::load(data)?;
    let cfg = flags.resolve(&file.train, mode, seed, dataset.config.folds);
    cfg.validate()?;
    let mut rec = Recorder::start(
        "train",
        &TrainRun {
            train: &cfg,
            data,
            teacher,
            held_out_fold: fold,
        },
        vec![seed],
    )?;
    rec.input(data);
    if let Some(c) = config {
        rec.input(c);
    }

    let samples = select(&dataset, fold, true)?;
    let model_config = model_config_for(&dataset);
    let teacher_model = match teacher {
        Some(path) => {
            rec.input(path);
            Some(ConvClassifier::<f32>::load_checkpoint(path, &model_config)?)
        }
        None => None,
    };
    let outcome = harness::train(&samples, &model_config, &cfg, teacher_model.as_ref())?;

    let mut provenance = BTreeMap::new();
    provenance.insert("mode".to_string(), json!(mode));
    provenance.insert("seed".to_string(), json!(seed));
    provenance.insert("epochs".to_string(), json!(cfg.epochs));
    provenance.insert("batch_size".to_string(), json!(cfg.batch_size));
    provenance.insert("learning_rate".to_string(), json!(cfg.learning_rate));
    provenance.insert("optimizer".to_string(), json!(cfg.optimizer));
    provenance.insert("loss_weights".to_string(), json!(cfg.effective_weights()));
    provenance.insert("held_out_fold".to_string(), json!(fold));
    outcome.model.save_checkpoint(out, &provenance)?;
    let log_path = out.join("train_log.csv");
    harness::write_log_csv(&log_path, &outcome.log)?;
    rec.finish(out, &[out.to_path_buf()])?;
    if let Some(last) = outcome.log.last() {
        println!(
            "{} epoch {}: L_total {:.4} L_attn {:.4} L_dist {:.4} L_cls {:.4} train_acc {:.4}",
            mode.as_str(),
            last.epoch,
            last.total,
            last.attn,
            last.dist,
            last.cls,
            last.train_acc
        );
    }
    Ok(())
}

fn checkpoint_mode(manifest: &CheckpointManifest) -> Mode {
    manifest
        .provenance
        .get("mode")
        .and_then(|v| serde_json::from_value(v.clone()).ok())
        .unwrap_or(Mode::StudentBaseline)
}

fn load_model(path: &Path, dataset: &Dataset) -> Result<(ConvClassifier<f32>, Mode)> {
    let (model, manifest) = ConvClassifier::<f32>::load_checkpoint_with_manifest(path)?;
    let (h, w) = dataset.image_size();
    if model.config().input_shape != (1, h, w) {
        return Err(Error::Config(format!(
            "checkpoint expects input {:?}, dataset images are (1, {h}, {w})",
            model.config().input_shape
        )));
    }
    Ok((model, checkpoint_mode(&manifest)))
}

fn eval_cmd(checkpoint: &Path, data: &Path, fold: Option<usize>, complement: bool, out: &Path) -> Result<(), CliError> {
    let mut rec = Recorder::start(
        "eval",
        &json!({ "checkpoint": checkpoint, "data": data, "fold": fold, "complement": complement }),
        Vec::new(),
    )?;
    rec.input(checkpoint);
    rec.input(data);
    let dataset = synthdata::load(data)?;
    let (model, mode) = load_model(checkpoint, &dataset)?;
    let samples = select(&dataset, fold, complement)?;
    let metrics = harness::evaluate(&model, &samples, mode)?;
    let split = match (fold, complement) {
        (None, _) => "all".to_string(),
        (Some(f), false) => format!("fold-{f}"),
        (Some(f), true) => format!("not-fold-{f}"),
    };
    create_dir(out)?;
    let csv_path = out.join("metrics.csv");
    write_csv(&csv_path, &METRICS_HEADER, &[metrics_row(mode.as_str(), &split, &metrics)])?;
    let json_path = out.join("metrics.json");
    write_json(&json_path, &metrics)?;
    rec.finish(out, &[csv_path, json_path])?;
    println!(
        "{} on {split} (n={}): Acc {} Prec {} Rec {} F1 {}",
        mode.as_str(),
        metrics.total(),
        pct(metrics.accuracy),
        pct(metrics.precision),
        pct(metrics.recall),
        pct(metrics.f1)
    );
    Ok(())
}

fn gradcheck_cmd(op: Option<&str>, configurations: usize, out: &Path, inject_bug: Option<&str>) -> Result<(), CliError> {
    let rec = Recorder::start(
        "gradcheck",
        &json!({ "op": op, "configurations": configurations, "inject_bug": inject_bug, "tolerance": suite::TOLERANCE }),
        (0..configurations as u64).collect(),
    )?;
    let reports = suite::run(configurations, op, inject_bug)?;
    let mut rows = Vec::new();
    for r in &reports {
        println!(
            "{:<20} {:<10} max rel err {:.3e}{} {}",
            r.op,
            format!("{:?}", r.group).to_lowercase(),
            r.max_relative_error,
            r.closed_form_error
                .map(|e| format!(", closed form err {e:.3e}"))
                .unwrap_or_default(),
            if r.passed { "PASS" } else { "FAIL" }
        );
        rows.push(vec![
            r.op.clone(),
            format!("{:?}", r.group).to_lowercase(),
            r.configurations.to_string(),
            format!("{:e}", r.max_relative_error),
            r.closed_form_error.map(|e| format!("{e:e}")).unwrap_or_default(),
            r.passed.to_string(),
        ]);
    }
    create_dir(out)?;
    let path = out.join("gradcheck.csv");
    write_csv(
        &path,
        &["op", "group", "configurations", "max_relative_error", "closed_form_error", "passed"],
        &rows,
    )?;
    rec.finish(out, &[path])?;
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed).map(|r| r.op.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Failed(format!("gradient check failed for: {}", failed.join(", "))))
    }
}

fn heatmap_cmd(
    models: &[(String, PathBuf)],
    data: &Path,
    ids: &[String],
    fold: Option<usize>,
    limit: usize,
    out: &Path,
) -> Result<(), CliError> {
    let mut rec = Recorder::start(
        "heatmap",
        &json!({ "models": models, "data": data, "samples": ids, "fold": fold, "limit": limit }),
        Vec::new(),
    )?;
    rec.input(data);
    let dataset = synthdata::load(data)?;
    let mut loaded = Vec::new();
    for (tag, path) in models {
        rec.input(path);
        loaded.push((tag.as_str(), load_model(path, &dataset)?.0));
    }
    let samples: Vec<&SynthSample> = if ids.is_empty() {
        select(&dataset, fold, false)?.into_iter().take(limit).collect()
    } else {
        ids.iter()
            .map(|id| {
                dataset
                    .samples
                    .iter()
                    .find(|s| s.id() == id)
                    .ok_or_else(|| CliError::Usage(format!("no sample with id `{id}`")))
            })
            .collect::<Result<_, _>>()?
    };
    create_dir(out)?;
    let mut outputs = Vec::new();
    let mut rows = Vec::new();
    for s in &samples {
        for (tag, model) in &loaded {
            let map = student_attention(model, &center(&s.full_image), s.class_index(), s.mask.grid())?;
            let path = out.join(format!("{}_{tag}.pgm", s.id()));
            write_pgm(&map, &path)?;
            outputs.push(path);
            rows.push(vec![
                s.id().to_string(),
                s.entry.label.to_string(),
                tag.to_string(),
                format!("{:.6}", overlap_score(&map, &s.mask)?),
            ]);
        }
    }
    let csv_path = out.join("overlap.csv");
    write_csv(&csv_path, &["sample_id", "label", "model", "overlap_score"], &rows)?;
    outputs.push(csv_path);
    rec.finish(out, &outputs)?;
    println!("wrote {} heatmaps to {}", rows.len(), out.display());
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentCheck {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub comparison: Comparison,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub data: SynthConfig,
    pub train: TrainConfig,
    pub seeds: Vec<SeedResult>,
    /// Means over seeds of the cross-validated means.
    pub teacher_accuracy: f64,
    pub baseline_accuracy: f64,
    pub distilled_accuracy: f64,
    pub baseline_overlap: f64,
    pub distilled_overlap: f64,
    pub checks: Vec<ExperimentCheck>,
}

impl ExperimentReport {
    fn new(data: SynthConfig, train: TrainConfig, seeds: Vec<SeedResult>) -> Self {
        let over = |f: &dyn Fn(&Comparison) -> f64| mean_sd(&seeds.iter().map(|s| f(&s.comparison)).collect::<Vec<_>>()).0;
        let (t, b, d) = (
            over(&|c| c.accuracies().0),
            over(&|c| c.accuracies().1),
            over(&|c| c.accuracies().2),
        );
        let (ob, od) = (over(&|c| c.overlaps().0), over(&|c| c.overlaps().1));
        let checks = vec![
            ExperimentCheck {
                name: "ordering".into(),
                passed: t > d && d > b,
                detail: format!("teacher {} > distilled {} > baseline {}", pct(t), pct(d), pct(b)),
            },
            ExperimentCheck {
                name: "accuracy-gap".into(),
                passed: d - b >= ACCURACY_GAP,
                detail: format!("distilled - baseline = {} points (need >= {})", pct(d - b), pct(ACCURACY_GAP)),
            },
            ExperimentCheck {
                name: "teacher-accuracy".into(),
                passed: t >= TEACHER_FLOOR,
                detail: format!("teacher {} % (need >= {})", pct(t), pct(TEACHER_FLOOR)),
            },
            ExperimentCheck {
                name: "overlap-gap".into(),
                passed: od - ob >= OVERLAP_GAP,
                detail: format!("distilled {od:.4} - baseline {ob:.4} = {:.4} (need >= {OVERLAP_GAP})", od - ob),
            },
        ];
        ExperimentReport {
            data,
            train,
            seeds,
            teacher_accuracy: t,
            baseline_accuracy: b,
            distilled_accuracy: d,
            baseline_overlap: ob,
            distilled_overlap: od,
            checks,
        }
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn check(&self, name: &str) -> Option<&ExperimentCheck> {
        self.checks.iter().find(|c| c.name == name)
    }
}

fn comparison_rows(c: &Comparison) -> Vec<Vec<String>> {
    let mut rows = Vec::new();
    for f in &c.folds {
        for (name, m, overlap) in [
            ("teacher", &f.teacher, None),
            ("baseline", &f.baseline, Some(f.baseline_overlap)),
            ("distilled", &f.distilled, Some(f.distilled_overlap)),
        ] {
            let mut row = metrics_row(name, &format!("fold-{}", f.fold), m);
            row.push(overlap.map(|o| format!("{o:.4}")).unwrap_or_default());
            rows.push(row);
        }
    }
    rows
}

fn experiment_cmd(
    out: &Path,
    seeds: Option<Vec<u64>>,
    jobs: Option<usize>,
    data_flags: &DataFlags,
    train_flags: &TrainFlags,
    config: Option<&Path>,
) -> Result<ExperimentReport, CliError> {
    let file = FileConfig::load(config)?;
    let seeds = seeds.or(file.experiment.seeds.clone()).unwrap_or_else(|| vec![0, 1, 2]);
    if seeds.is_empty() {
        return Err(CliError::Usage("--seeds needs at least one seed".into()));
    }
    let jobs = jobs.or(file.experiment.jobs).unwrap_or(1);
    let data_cfg = data_flags.resolve(&file.data, seeds[0]);
    let train_cfg = train_flags.resolve(&file.train, Mode::StudentDistilled, seeds[0], data_cfg.folds);
    data_cfg.validate()?;
    train_cfg.validate()?;
    let mut rec = Recorder::start(
        "experiment",
        &json!({ "data": data_cfg, "train": train_cfg, "seeds": seeds, "jobs": jobs }),
        seeds.clone(),
    )?;
    if let Some(c) = config {
        rec.input(c);
    }

    let mut mid_header: Vec<&str> = vec!["model", "split", "n", "Acc (%)", "Prec (%)", "Rec (%)", "F1 (%)"];
    mid_header.push("overlap");
    let mut results = Vec::new();
    for &seed in &seeds {
        let dir = out.join(format!("seed-{seed}"));
        let dataset = synthdata::generate(&SynthConfig { master_seed: seed, ..data_cfg.clone() }, &dir.join("data"))?;
        let cfg = TrainConfig { seed, ..train_cfg.clone() };
        let comparison = harness::compare(&dataset, &model_config_for(&dataset), &cfg, jobs)?;
        write_csv(&dir.join("folds.csv"), &mid_header, &comparison_rows(&comparison))?;
        let (t, b, d) = comparison.accuracies();
        let (ob, od) = comparison.overlaps();
        println!(
            "seed {seed}: teacher {} baseline {} distilled {} | overlap baseline {ob:.4} distilled {od:.4}",
            pct(t),
            pct(b),
            pct(d)
        );
        results.push(SeedResult { seed, comparison });
    }

    let report = ExperimentReport::new(data_cfg, train_cfg, results);
    let mut rows = Vec::new();
    let sd_of = |f: &dyn Fn(&Comparison) -> f64| mean_sd(&report.seeds.iter().map(|s| f(&s.comparison)).collect::<Vec<_>>()).1;
    for (name, acc, sd, overlap) in [
        ("teacher", report.teacher_accuracy, sd_of(&|c| c.accuracies().0), None),
        ("distilled", report.distilled_accuracy, sd_of(&|c| c.accuracies().2), Some(report.distilled_overlap)),
        ("baseline", report.baseline_accuracy, sd_of(&|c| c.accuracies().1), Some(report.baseline_overlap)),
    ] {
        let pick = |f: fn(&Metrics) -> f64| {
            let per_seed: Vec<f64> = report
                .seeds
                .iter()
                .map(|s| {
                    let v: Vec<f64> = s
                        .comparison
                        .folds
                        .iter()
                        .map(|fc| match name {
                            "teacher" => f(&fc.teacher),
                            "baseline" => f(&fc.baseline),
                            _ => f(&fc.distilled),
                        })
                        .collect();
                    mean_sd(&v).0
                })
                .collect();
            mean_sd(&per_seed).0
        };
        rows.push(vec![
            name.to_string(),
            pct(acc),
            pct(sd),
            pct(pick(|m| m.precision)),
            pct(pick(|m| m.recall)),
            pct(pick(|m| m.f1)),
            overlap.map(|o| format!("{o:.4}")).unwrap_or_default(),
        ]);
    }
    create_dir(out)?;
    let csv_path = out.join("report.csv");
    write_csv(
        &csv_path,
        &["model", "Acc (%)", "Acc sd (%)", "Prec (%)", "Rec (%)", "F1 (%)", "overlap"],
        &rows,
    )?;
    let json_path = out.join("report.json");
    write_json(&json_path, &report)?;
    rec.finish(out, &[out.to_path_buf()])?;

    println!("\n{:<10} {:>8} {:>8} {:>8} {:>8} {:>8}", "model", "Acc", "Prec", "Rec", "F1", "overlap");
    for r in &rows {
        println!("{:<10} {:>8} {:>8} {:>8} {:>8} {:>8}", r[0], r[1], r[3], r[4], r[5], r[6]);
    }
    for c in &report.checks {
        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    if report.passed() {
        Ok(report)
    } else {
        let failed: Vec<&str> = report.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
        Err(CliError::Failed(format!("experiment checks failed: {}", failed.join(", "))))
    }
}
