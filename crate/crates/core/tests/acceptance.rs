//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any criterion fails.
//!
//! Criterion 5 trains 45 models per seed over three seeds, so this target
//! takes on the order of twenty minutes on one core.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use spatialkd::cli::{ExperimentReport, RunManifest, RUN_MANIFEST};
use spatialkd::gradcheck::suite;
use spatialkd::harness::{fold_split, train, Metrics, Mode, TrainConfig};
use spatialkd::losses::{kl_distill, softmax_values, LossWeights};
use spatialkd::model::{ConvClassifier, ConvNetConfig};
use spatialkd::synthdata::{self, SynthConfig};
use spatialkd::{container, Error, Graph, Tensor};

type Outcome = Result<String, String>;

fn bin(args: &[&str]) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_spatialkd"))
        .args(args)
        .output()
        .expect("binary runs");
    let text = String::from_utf8_lossy(&out.stdout).into_owned() + &String::from_utf8_lossy(&out.stderr);
    (out.status.code().unwrap_or(-1), text)
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn gradient_correctness() -> Outcome {
    let t0 = Instant::now();
    let reports = suite::run(suite::DEFAULT_CONFIGURATIONS, None, None).map_err(|e| e.to_string())?;
    let secs = t0.elapsed().as_secs_f64();
    let worst = reports
        .iter()
        .max_by(|a, b| a.max_relative_error.total_cmp(&b.max_relative_error))
        .unwrap();
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed).map(|r| r.op.as_str()).collect();
    ensure(failed.is_empty(), format!("failing ops: {failed:?}"))?;
    ensure(worst.max_relative_error < 1e-4, format!("max error {:e}", worst.max_relative_error))?;
    ensure(secs < 120.0, format!("took {secs:.1}s"))?;
    for group in ["Loss", "GradCam", "Primitive"] {
        ensure(
            reports.iter().any(|r| format!("{:?}", r.group) == group),
            format!("no {group} checks ran"),
        )?;
    }
    Ok(format!(
        "{} checks x {} configurations, worst {:.2e} ({}), {secs:.1}s",
        reports.len(),
        suite::DEFAULT_CONFIGURATIONS,
        worst.max_relative_error,
        worst.op
    ))
}

fn attention_identity() -> Outcome {
    let err = suite::attention_closed_form(100).map_err(|e| e.to_string())?;
    ensure(err <= 1e-6, format!("max deviation {err:e}"))?;
    Ok(format!("100 pairs, max deviation {err:.1e}"))
}

fn kl_direct(teacher: &[f64], student: &[f64], t: f64) -> f64 {
    let soft = |z: &[f64]| {
        let e: Vec<f64> = z.iter().map(|v| (v / t).exp()).collect();
        let s: f64 = e.iter().sum();
        e.into_iter().map(|v| v / s).collect::<Vec<_>>()
    };
    let (pk, qk) = (soft(teacher), soft(student));
    t * t * pk.iter().zip(&qk).map(|(a, b)| a * (a / b).ln()).sum::<f64>()
}

fn kl_engine(teacher: &[f64], student: &[f64], t: f64) -> f64 {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::new(vec![teacher.len()], teacher.to_vec()).unwrap()).unwrap();
    let b = g.param(Tensor::new(vec![student.len()], student.to_vec()).unwrap()).unwrap();
    let v = kl_distill(&mut g, a, b, t).unwrap();
    g.value(v).item()
}

fn distillation_algebra() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    for t in [1.0, 3.0, 10.0] {
        for _ in 0..100 {
            let z: Vec<f64> = (0..5).map(|_| rng.random_range(-5.0..5.0)).collect();
            let y: Vec<f64> = (0..5).map(|_| rng.random_range(-5.0..5.0)).collect();
            let got = kl_engine(&z, &y, t);
            ensure(got >= 0.0, format!("negative KL {got} at T={t}"))?;
            worst = worst.max((got - kl_direct(&z, &y, t)).abs());
            ensure(kl_engine(&z, &z, t).abs() < 1e-12, "KL of identical logits is not 0")?;
        }
    }
    ensure(worst <= 1e-6, format!("oracle deviation {worst:e}"))?;
    let entropy = |q: &[f64]| -q.iter().map(|v| v * v.ln()).sum::<f64>();
    for _ in 0..100 {
        let z: Vec<f64> = (0..5).map(|_| rng.random_range(-5.0..5.0)).collect();
        let mut last = f64::NEG_INFINITY;
        for t in [0.5, 1.0, 2.0, 3.0, 5.0, 10.0, 30.0] {
            let h = entropy(&softmax_values(&z, t).unwrap());
            ensure(h >= last - 1e-12, format!("entropy decreased at T={t}"))?;
            last = h;
        }
    }
    Ok(format!("300 pairs at T in {{1,3,10}}, max oracle deviation {worst:.1e}"))
}

fn degenerate_weights() -> Outcome {
    let ds = synthdata::build(&SynthConfig {
        samples_per_class: 8,
        folds: 2,
        master_seed: 77,
        ..SynthConfig::default()
    })
    .map_err(|e| e.to_string())?;
    let samples: Vec<_> = ds.samples.iter().collect();
    let mc = ConvNetConfig::default();
    let base = TrainConfig {
        epochs: 3,
        seed: 13,
        ..TrainConfig::default()
    };
    let teacher = train(&samples, &mc, &base.with_mode(Mode::Teacher), None)
        .map_err(|e| e.to_string())?
        .model;
    let baseline = train(&samples, &mc, &base.with_mode(Mode::StudentBaseline), None).map_err(|e| e.to_string())?;
    let degenerate = TrainConfig {
        loss_weights: LossWeights {
            alpha: 0.0,
            beta: 0.0,
            theta: 1.0,
            temperature: 3.0,
        },
        ..base.with_mode(Mode::StudentDistilled)
    };
    let distilled = train(&samples, &mc, &degenerate, Some(&teacher)).map_err(|e| e.to_string())?;
    let bits = |m: &ConvClassifier<f32>| -> Vec<u32> {
        m.params().iter().flat_map(|t| t.data().iter().map(|v| v.to_bits())).collect()
    };
    ensure(bits(&baseline.model) == bits(&distilled.model), "final parameters differ")?;
    let trace = |log: &[spatialkd::harness::EpochLog]| -> Vec<u64> { log.iter().map(|l| l.total.to_bits()).collect() };
    ensure(trace(&baseline.log) == trace(&distilled.log), "loss trajectories differ")?;
    Ok(format!(
        "{} parameters and {} epoch losses bit-identical",
        baseline.model.num_parameters(),
        baseline.log.len()
    ))
}

fn run_experiment(dir: &Path) -> Result<(ExperimentReport, f64), String> {
    let t0 = Instant::now();
    let (code, text) = bin(&["experiment", "--out", p(dir)]);
    let secs = t0.elapsed().as_secs_f64();
    print!("{text}");
    let json = fs::read_to_string(dir.join("report.json")).map_err(|e| format!("no report (exit {code}): {e}"))?;
    let report: ExperimentReport = serde_json::from_str(&json).map_err(|e| e.to_string())?;
    let expected_code = if report.passed() { 0 } else { 1 };
    ensure(code == expected_code, format!("experiment exited {code}, expected {expected_code}"))?;
    Ok((report, secs))
}

fn ordering(report: &ExperimentReport, secs: f64) -> Outcome {
    let (t, b, d) = (report.teacher_accuracy, report.baseline_accuracy, report.distilled_accuracy);
    let summary = format!(
        "teacher {:.2}%, distilled {:.2}%, baseline {:.2}%, gap {:.2} points over seeds {:?}, {:.0}s",
        100.0 * t,
        100.0 * d,
        100.0 * b,
        100.0 * (d - b),
        report.seeds.iter().map(|s| s.seed).collect::<Vec<_>>(),
        secs
    );
    let ok = t > d && d > b && d - b >= 0.02 && t >= 0.95 && report.seeds.len() == 3;
    ensure(ok, summary.clone())?;
    Ok(summary)
}

fn localization(report: &ExperimentReport) -> Outcome {
    let (b, d) = (report.baseline_overlap, report.distilled_overlap);
    let summary = format!("overlap distilled {d:.4} vs baseline {b:.4} (+{:.4})", d - b);
    ensure(d - b >= 0.10, summary.clone())?;
    Ok(summary)
}

fn brute_force(k: usize, truth: &[usize], pred: &[usize]) -> (f64, f64, f64, f64) {
    let n = truth.len() as f64;
    let (mut wp, mut wr, mut wf) = (0.0, 0.0, 0.0);
    for c in 0..k {
        let tp = truth.iter().zip(pred).filter(|&(&t, &q)| t == c && q == c).count();
        let sup = truth.iter().filter(|&&t| t == c).count();
        let npred = pred.iter().filter(|&&q| q == c).count();
        let pr = if npred > 0 { tp as f64 / npred as f64 } else { 0.0 };
        let rc = if sup > 0 { tp as f64 / sup as f64 } else { 0.0 };
        let f1 = if pr + rc > 0.0 { 2.0 * pr * rc / (pr + rc) } else { 0.0 };
        wp += pr * sup as f64;
        wr += rc * sup as f64;
        wf += f1 * sup as f64;
    }
    let acc = truth.iter().zip(pred).filter(|(t, q)| t == q).count() as f64 / n;
    (acc, wp / n, wr / n, wf / n)
}

fn metric_fidelity(report: Option<&ExperimentReport>) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for case in 0..50 {
        let k = rng.random_range(2..6);
        let n = rng.random_range(1..30);
        let truth: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let pred: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let m = Metrics::from_predictions(k, &truth, &pred).map_err(|e| e.to_string())?;
        let (acc, wp, wr, wf) = brute_force(k, &truth, &pred);
        ensure(
            m.accuracy == acc && m.precision == wp && m.f1 == wf && (m.recall - wr).abs() < 1e-12,
            format!("case {case} disagrees with the oracle"),
        )?;
        ensure(m.recall == m.accuracy, format!("case {case}: recall != accuracy"))?;
    }
    let mut evaluations = 50;
    if let Some(r) = report {
        for s in &r.seeds {
            for f in &s.comparison.folds {
                for m in [&f.teacher, &f.baseline, &f.distilled] {
                    ensure(m.recall == m.accuracy, format!("seed {} fold {}: recall != accuracy", s.seed, f.fold))?;
                    evaluations += 1;
                }
            }
        }
    }
    Ok(format!("50 random sets match the oracle; recall == accuracy on {evaluations} evaluations"))
}

fn output_hashes(dir: &Path) -> Result<Vec<String>, String> {
    let m = RunManifest::read(&dir.join(RUN_MANIFEST)).map_err(|e| e.to_string())?;
    Ok(m.outputs.into_iter().map(|a| a.sha256).collect())
}

fn rerun_from_manifest(work: &Path) -> Result<usize, String> {
    let data = work.join("data");
    let (code, text) = bin(&["gen-data", "--out", p(&data), "--seed", "31", "--samples-per-class", "10"]);
    ensure(code == 0, text)?;

    // Rebuild the gen-data flags from nothing but the recorded manifest.
    let m = RunManifest::read(&data.join(RUN_MANIFEST)).map_err(|e| e.to_string())?;
    let c = &m.config;
    let data2 = work.join("data2");
    let flags = [
        "--seed".to_string(),
        m.seeds[0].to_string(),
        "--samples-per-class".into(),
        c["samples_per_class"].to_string(),
        "--noise".into(),
        c["noise_sigma"].to_string(),
        "--distractors".into(),
        c["distractor_count"].to_string(),
        "--folds".into(),
        c["folds"].to_string(),
    ];
    let mut args = vec!["gen-data", "--out", p(&data2)];
    args.extend(flags.iter().map(String::as_str));
    let (code, text) = bin(&args);
    ensure(code == 0, text)?;
    ensure(output_hashes(&data)? == output_hashes(&data2)?, "gen-data rerun changed outputs")?;

    let mut compared = 1;
    for (name, args) in [
        ("teacher", vec!["train", "--data", p(&data), "--mode", "teacher", "--fold", "1", "--epochs", "2"]),
        ("gradcheck", vec!["gradcheck", "--op", "kl_distill", "--configurations", "5"]),
    ] {
        let mut hashes = Vec::new();
        for run in 0..2 {
            let out = work.join(format!("{name}-{run}"));
            let mut full = args.clone();
            full.extend(["--out", p(&out)]);
            let (code, text) = bin(&full);
            ensure(code == 0, text)?;
            hashes.push(output_hashes(&out)?);
        }
        ensure(hashes[0] == hashes[1], format!("{name} rerun changed outputs"))?;
        compared += 1;
    }
    let mut evals = Vec::new();
    for run in 0..2 {
        let out = work.join(format!("eval-{run}"));
        let (code, text) = bin(&[
            "eval",
            "--checkpoint",
            p(&work.join("teacher-0")),
            "--data",
            p(&data),
            "--fold",
            "1",
            "--out",
            p(&out),
        ]);
        ensure(code == 0, text)?;
        evals.push(output_hashes(&out)?);
    }
    ensure(evals[0] == evals[1], "eval rerun changed outputs")?;
    Ok(compared + 1)
}

fn partitions(work: &Path, report: Option<&ExperimentReport>) -> Result<usize, String> {
    let ds = synthdata::load(&work.join("data")).map_err(|e| e.to_string())?;
    let k = ds.config.folds;
    let mut seen: BTreeMap<String, usize> = BTreeMap::new();
    for f in 0..k {
        let (train_set, eval_set) = fold_split(&ds, f).map_err(|e| e.to_string())?;
        ensure(train_set.len() + eval_set.len() == ds.samples.len(), "fold split loses samples")?;
        let mut per_class = [0usize; 5];
        for s in &eval_set {
            *seen.entry(s.id().to_string()).or_default() += 1;
            per_class[s.class_index()] += 1;
        }
        let counts = ds.config.class_counts();
        for (c, &n) in per_class.iter().enumerate() {
            ensure(n.abs_diff(counts[c] / k) <= 1, format!("fold {f} is not stratified for stage {}", c + 1))?;
        }
    }
    ensure(seen.len() == ds.samples.len() && seen.values().all(|&n| n == 1), "a sample is evaluated twice or never")?;
    let mut checked = 1;
    if let Some(r) = report {
        for s in &r.seeds {
            let mut ids: Vec<&String> = s.comparison.folds.iter().flat_map(|f| &f.eval_ids).collect();
            let n = ids.len();
            ids.sort();
            ids.dedup();
            ensure(ids.len() == n && n == r.data.samples_per_class * 5, format!("seed {} folds overlap", s.seed))?;
            checked += 1;
        }
    }
    Ok(checked)
}

fn reproducibility(work: &Path, report: Option<&ExperimentReport>) -> Outcome {
    let commands = rerun_from_manifest(work)?;
    let datasets = partitions(work, report)?;
    Ok(format!(
        "{commands} commands rerun with identical output hashes; {datasets} datasets exactly partitioned"
    ))
}

fn round_trips(work: &Path) -> Outcome {
    let dir = work.join("rt");
    let cfg = SynthConfig {
        samples_per_class: 3,
        folds: 3,
        master_seed: 5,
        ..SynthConfig::default()
    };
    let built = synthdata::generate(&cfg, &dir).map_err(|e| e.to_string())?;
    let loaded = synthdata::load(&dir).map_err(|e| e.to_string())?;
    ensure(built == loaded, "dataset differs after load")?;

    let ckpt = work.join("ckpt");
    let model = ConvClassifier::<f32>::init(ConvNetConfig {
        init_seed: 8,
        ..ConvNetConfig::default()
    })
    .map_err(|e| e.to_string())?;
    model.save_checkpoint(&ckpt, &BTreeMap::new()).map_err(|e| e.to_string())?;
    let back = ConvClassifier::<f32>::load_checkpoint(&ckpt, model.config()).map_err(|e| e.to_string())?;
    ensure(back.params() == model.params(), "checkpoint differs after load")?;

    // Corruptions: bad magic, truncation, missing file. All must exit 3.
    let sample = dir.join("samples").join(format!("{}.full.dtk", built.samples[0].id()));
    let good = fs::read(&sample).unwrap();
    let mut bad = good.clone();
    bad[1] ^= 0xff;
    let out = work.join("rt-out");
    let train_args = ["train", "--data", p(&dir), "--mode", "teacher", "--epochs", "1", "--out", p(&out)];
    for (what, bytes) in [("bad magic", Some(bad)), ("truncated", Some(good[..good.len() - 3].to_vec())), ("missing", None)] {
        match bytes {
            Some(b) => fs::write(&sample, b).unwrap(),
            None => fs::remove_file(&sample).unwrap(),
        }
        let (code, _) = bin(&train_args);
        ensure(code == 3, format!("{what} dataset file exited {code}"))?;
    }
    fs::write(&sample, &good).unwrap();

    let param = ckpt.join("conv0.weight.dtk");
    let mut bytes = fs::read(&param).unwrap();
    bytes.truncate(bytes.len() - 1);
    fs::write(&param, &bytes).unwrap();
    ensure(
        matches!(
            ConvClassifier::<f32>::load_checkpoint_with_manifest(&ckpt),
            Err(Error::CorruptContainer { .. })
        ),
        "truncated checkpoint accepted",
    )?;
    let (code, _) = bin(&["eval", "--checkpoint", p(&ckpt), "--data", p(&dir), "--out", p(&out)]);
    ensure(code == 3, format!("corrupt checkpoint exited {code}"))?;
    ensure(
        container::decode::<f32>(b"DTK", "x".as_ref()).is_err(),
        "short container accepted",
    )?;
    Ok("dataset and checkpoint bit-exact; corrupt, truncated and missing files exit 3".into())
}

fn main() -> ExitCode {
    let work = tempfile::tempdir().expect("temp dir");
    let mut results: Vec<(u8, &str, Outcome)> = vec![
        (1, "gradient correctness", gradient_correctness()),
        (2, "attention gradient identity", attention_identity()),
        (3, "distillation-loss algebra", distillation_algebra()),
        (4, "degenerate-weights equivalence", degenerate_weights()),
        (9, "format round-trips", round_trips(work.path())),
    ];

    let experiment = run_experiment(&work.path().join("experiment"));
    let report = experiment.as_ref().ok().map(|(r, _)| r);
    match &experiment {
        Ok((r, secs)) => {
            results.push((5, "ordering experiment", ordering(r, *secs)));
            results.push((6, "attention localization", localization(r)));
        }
        Err(e) => {
            results.push((5, "ordering experiment", Err(e.clone())));
            results.push((6, "attention localization", Err(e.clone())));
        }
    }
    results.push((7, "metric fidelity", metric_fidelity(report)));
    results.push((8, "reproducibility", reproducibility(work.path(), report)));

    results.sort_by_key(|r| r.0);
    println!();
    let mut all = true;
    for (n, name, outcome) in &results {
        match outcome {
            Ok(detail) => println!("criterion {n} PASS {name}: {detail}"),
            Err(detail) => {
                all = false;
                println!("criterion {n} FAIL {name}: {detail}");
            }
        }
    }
    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
