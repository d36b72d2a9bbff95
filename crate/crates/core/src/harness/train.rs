use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{Metrics, Mode, Optimizer, TrainConfig};
use crate::error::{Error, Result};
use crate::gradcam::{attention_var, overlap_score, student_attention};
use crate::losses::{attention_mse, cross_entropy, kl_distill, total_loss};
use crate::model::{argmax, ConvClassifier, ConvNetConfig};
use crate::seeds::{derive_seed, stream_rng};
use crate::synthdata::SynthSample;
use crate::tape::Graph;
use crate::tensor::Tensor;

pub const LOG_HEADER: [&str; 6] = ["epoch", "L_total", "L_attn", "L_dist", "L_cls", "train_acc"];

/// Sample means over one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub total: f64,
    pub attn: f64,
    pub dist: f64,
    pub cls: f64,
    pub train_acc: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: ConvClassifier<f32>,
    pub log: Vec<EpochLog>,
}

/// Subtracted from every pixel before an image reaches a model.
pub const INPUT_CENTER: f32 = 0.5;

/// Centers a `[0, 1]` image around zero.
pub fn center(image: &Tensor<f32>) -> Tensor<f32> {
    image.map(|v| v - INPUT_CENTER)
}

/// The centered image a model in `mode` consumes.
pub fn model_input(sample: &SynthSample, mode: Mode) -> Tensor<f32> {
    center(if mode.uses_crops() {
        &sample.cropped_image
    } else {
        &sample.full_image
    })
}

/// Frozen-teacher logits on the sample's crop; plain values, so nothing
/// downstream can route gradient into the teacher.
pub fn distill_inputs(teacher: &ConvClassifier<f32>, sample: &SynthSample) -> Result<Vec<f32>> {
    teacher.logits(&center(&sample.cropped_image))
}

fn check_inputs(
    samples: &[&SynthSample],
    model_config: &ConvNetConfig,
    config: &TrainConfig,
    teacher: Option<&ConvClassifier<f32>>,
) -> Result<()> {
    config.validate()?;
    model_config.validate()?;
    if samples.is_empty() {
        return Err(Error::Contract("training split is empty".into()));
    }
    let (c, h, w) = model_config.input_shape;
    for s in samples {
        let image = if config.mode.uses_crops() { &s.cropped_image } else { &s.full_image };
        let shape = image.shape();
        if shape != [c, h, w] {
            return Err(Error::Config(format!(
                "sample {} has shape {shape:?}, model expects {:?}",
                s.id(),
                [c, h, w]
            )));
        }
        if s.class_index() >= model_config.num_classes {
            return Err(Error::Config(format!(
                "sample {} has stage {}, model has {} classes",
                s.id(),
                s.entry.label,
                model_config.num_classes
            )));
        }
    }
    match (config.mode, teacher) {
        (Mode::StudentDistilled, None) => Err(Error::Config("student-distilled mode needs a teacher".into())),
        (Mode::StudentDistilled, Some(t)) if t.config().num_classes != model_config.num_classes => {
            Err(Error::Config(format!(
                "teacher has {} classes, student {}",
                t.config().num_classes,
                model_config.num_classes
            )))
        }
        _ => Ok(()),
    }
}

/// Trains a fresh model. The architecture comes from `model_config`; its
/// initial weights come from the `init` stream of `config.seed`.
pub fn train(
    samples: &[&SynthSample],
    model_config: &ConvNetConfig,
    config: &TrainConfig,
    teacher: Option<&ConvClassifier<f32>>,
) -> Result<TrainOutcome> {
    check_inputs(samples, model_config, config, teacher)?;
    let mode = config.mode;
    let weights = config.effective_weights();
    let distilled = mode == Mode::StudentDistilled;

    let teacher_logits = match teacher {
        Some(t) if distilled => samples.iter().map(|s| distill_inputs(t, s)).collect::<Result<Vec<_>>>()?,
        _ => Vec::new(),
    };

    let mut arch = model_config.clone();
    arch.init_seed = derive_seed(config.seed, "init", 0);
    let mut model = ConvClassifier::<f32>::init(arch)?;
    let mut optimizer = Optimizer::new(config.optimizer, config.learning_rate, model.params());
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut log = Vec::with_capacity(config.epochs);

    for epoch in 1..=config.epochs {
        order.shuffle(&mut stream_rng(config.seed, "shuffle", epoch as u64));
        let mut sums = [0.0f64; 4];
        let mut correct = 0usize;
        for batch in order.chunks(config.batch_size) {
            let mut g = Graph::<f32>::new();
            let bound = model.bind(&mut g, true)?;
            let mut terms = Vec::with_capacity(batch.len());
            for &i in batch {
                let sample = samples[i];
                let label = sample.class_index();
                let x = g.constant(model_input(sample, mode))?;
                let out = model.forward(&mut g, &bound, x)?;
                if argmax(g.value(out.logits).data()) == label {
                    correct += 1;
                }
                let cls = cross_entropy(&mut g, out.logits, label)?;
                let (attn, dist) = if distilled {
                    let heat = attention_var(&mut g, cls, out.activations, sample.mask.grid())?;
                    let mask = g.constant(sample.mask.values().clone())?;
                    let attn = attention_mse(&mut g, heat, mask)?;
                    let t = g.constant(Tensor::new(vec![teacher_logits[i].len()], teacher_logits[i].clone())?)?;
                    let dist = kl_distill(&mut g, t, out.logits, weights.temperature)?;
                    (attn, dist)
                } else {
                    let zero = g.constant(Tensor::scalar(0.0))?;
                    (zero, zero)
                };
                let total = total_loss(&mut g, attn, dist, cls, &weights)?;
                for (acc, v) in sums.iter_mut().zip([total, attn, dist, cls]) {
                    *acc += g.value(v).item() as f64;
                }
                terms.push(total);
            }
            let mut loss = terms[0];
            for &t in &terms[1..] {
                loss = g.add(loss, t)?;
            }
            let loss = g.scale(loss, 1.0 / batch.len() as f32)?;
            g.backward(loss)?;
            let grads: Vec<Tensor<f32>> = bound
                .vars
                .iter()
                .map(|&v| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(g.shape(v).to_vec())))
                .collect();
            optimizer.step(model.params_mut(), &grads)?;
        }
        let n = samples.len() as f64;
        log.push(EpochLog {
            epoch,
            total: sums[0] / n,
            attn: sums[1] / n,
            dist: sums[2] / n,
            cls: sums[3] / n,
            train_acc: correct as f64 / n,
        });
    }
    Ok(TrainOutcome { model, log })
}

/// Argmax predictions on `samples`, fed the input `mode` consumes.
pub fn evaluate(model: &ConvClassifier<f32>, samples: &[&SynthSample], mode: Mode) -> Result<Metrics> {
    if samples.is_empty() {
        return Err(Error::Contract("cannot evaluate an empty split".into()));
    }
    let mut truth = Vec::with_capacity(samples.len());
    let mut predicted = Vec::with_capacity(samples.len());
    for s in samples {
        truth.push(s.class_index());
        predicted.push(model.predict(&model_input(s, mode))?);
    }
    Metrics::from_predictions(model.config().num_classes, &truth, &predicted)
}

/// Per-sample overlap of the true-class heatmap on the full image with the ROI mask.
pub fn evaluate_overlap(model: &ConvClassifier<f32>, samples: &[&SynthSample]) -> Result<Vec<f64>> {
    samples
        .iter()
        .map(|s| {
            let map = student_attention(model, &center(&s.full_image), s.class_index(), s.mask.grid())?;
            overlap_score(&map, &s.mask)
        })
        .collect()
}

pub fn write_log_csv(path: &Path, log: &[EpochLog]) -> Result<()> {
    let mut out = csv::Writer::from_writer(Vec::new());
    out.write_record(LOG_HEADER)?;
    for e in log {
        out.write_record([
            e.epoch.to_string(),
            e.total.to_string(),
            e.attn.to_string(),
            e.dist.to_string(),
            e.cls.to_string(),
            e.train_acc.to_string(),
        ])?;
    }
    let bytes = out.into_inner().map_err(|e| Error::io(path, e.into_error()))?;
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&bytes).map_err(|e| Error::io(path, e))
}
