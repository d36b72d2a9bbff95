//! Seeded finite-difference checks of every differentiable operation, each
//! loss, the Grad-CAM chain and the model end to end.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{finite_difference_grad, max_relative_error, DEFAULT_STEP};
use crate::error::{Error, Result};
use crate::gradcam::{gradcam_heatmap_var, min_max_normalize, upsample_bilinear_var};
use crate::losses::{self, LossWeights};
use crate::model::{BoundParams, ConvBlock, ConvClassifier, ConvNetConfig};
use crate::seeds::stream_rng;
use crate::tape::{Conv2dParams, Graph, Var};
use crate::tensor::Tensor;

/// Largest accepted relative error between autodiff and central differences.
pub const TOLERANCE: f64 = 1e-4;

/// Accepted deviation from the closed-form attention gradient `(2/N)(A - M)`.
pub const CLOSED_FORM_TOLERANCE: f64 = 1e-6;

pub const DEFAULT_CONFIGURATIONS: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Group {
    Primitive,
    Loss,
    GradCam,
    Model,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpReport {
    pub op: String,
    pub group: Group,
    pub configurations: usize,
    pub max_relative_error: f64,
    /// Worst deviation from the closed form, for `attention_mse` only.
    pub closed_form_error: Option<f64>,
    pub passed: bool,
}

type Build = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;

/// Differentiable inputs plus a graph builder; anything the builder
/// captures is a constant.
struct Problem {
    inputs: Vec<Tensor<f64>>,
    build: Build,
}

type Generator = fn(&mut ChaCha8Rng) -> Result<Problem>;

const CHECKS: &[(&str, Group, Generator)] = &[
    ("add", Group::Primitive, gen_add),
    ("sub", Group::Primitive, gen_sub),
    ("mul", Group::Primitive, gen_mul),
    ("div", Group::Primitive, gen_div),
    ("scale", Group::Primitive, gen_scale),
    ("offset", Group::Primitive, gen_offset),
    ("matmul", Group::Primitive, gen_matmul),
    ("conv2d", Group::Primitive, gen_conv2d),
    ("max_pool2d", Group::Primitive, gen_max_pool),
    ("relu", Group::Primitive, gen_relu),
    ("exp", Group::Primitive, gen_exp),
    ("log", Group::Primitive, gen_log),
    ("reshape", Group::Primitive, gen_reshape),
    ("global_avg_pool", Group::Primitive, gen_gap),
    ("sum", Group::Primitive, gen_sum),
    ("mean", Group::Primitive, gen_mean),
    ("max", Group::Primitive, gen_max),
    ("min", Group::Primitive, gen_min),
    ("softmax_t", Group::Loss, gen_softmax),
    ("kl_distill", Group::Loss, gen_kl),
    ("cross_entropy", Group::Loss, gen_ce),
    ("attention_mse", Group::Loss, gen_attention_mse),
    ("total_loss", Group::Loss, gen_total),
    ("min_max_normalize", Group::GradCam, gen_normalize),
    ("upsample_bilinear", Group::GradCam, gen_upsample),
    ("gradcam_chain", Group::GradCam, gen_gradcam_chain),
    ("model_cross_entropy", Group::Model, gen_model_ce),
    ("model_kl_distill", Group::Model, gen_model_kl),
    ("model_attention", Group::Model, gen_model_attention),
    ("model_total_loss", Group::Model, gen_model_total),
];

pub fn op_names() -> Vec<&'static str> {
    CHECKS.iter().map(|c| c.0).collect()
}

/// Runs every check (or only `only`) over `configurations` seeds.
///
/// `inject_bug` names an op whose autodiff gradient is deliberately
/// perturbed, so callers can confirm that failures are detected and named.
pub fn run(configurations: usize, only: Option<&str>, inject_bug: Option<&str>) -> Result<Vec<OpReport>> {
    if let Some(name) = only.into_iter().chain(inject_bug).find(|n| !op_names().contains(n)) {
        return Err(Error::Config(format!(
            "unknown op `{name}`; expected one of {}",
            op_names().join(", ")
        )));
    }
    if configurations == 0 {
        return Err(Error::Config("need at least one configuration".into()));
    }
    CHECKS
        .iter()
        .filter(|(name, ..)| only.is_none_or(|o| o == *name))
        .map(|&(name, group, gen)| {
            let mut worst: f64 = 0.0;
            for seed in 0..configurations as u64 {
                let mut rng = stream_rng(seed, name, 0);
                let problem = gen(&mut rng)?;
                let cotangent_seed: u64 = rng.random();
                worst = worst.max(check(&problem, cotangent_seed, inject_bug == Some(name))?);
            }
            let closed_form_error = if name == "attention_mse" {
                Some(attention_closed_form(configurations.max(100))?)
            } else {
                None
            };
            let passed = worst < TOLERANCE && closed_form_error.is_none_or(|e| e < CLOSED_FORM_TOLERANCE);
            Ok(OpReport {
                op: name.to_string(),
                group,
                configurations,
                max_relative_error: worst,
                closed_form_error,
                passed,
            })
        })
        .collect()
}

/// Scalar objective: the output itself, or its inner product with a fixed
/// random cotangent when the output is not a scalar.
fn objective(g: &mut Graph<f64>, out: Var, cotangent_seed: u64) -> Result<Var> {
    if g.value(out).is_scalar() {
        return Ok(out);
    }
    let shape = g.shape(out).to_vec();
    let n = g.value(out).len();
    let mut rng = stream_rng(cotangent_seed, "cotangent", 0);
    let c: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let c = g.constant(Tensor::new(shape, c)?)?;
    let prod = g.mul(out, c)?;
    g.sum(prod)
}

fn check(problem: &Problem, cotangent_seed: u64, perturb: bool) -> Result<f64> {
    let mut g = Graph::new();
    let vars = problem
        .inputs
        .iter()
        .map(|t| g.param(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = (problem.build)(&mut g, &vars)?;
    let loss = objective(&mut g, out, cotangent_seed)?;
    g.backward(loss)?;

    let mut worst: f64 = 0.0;
    for (i, &v) in vars.iter().enumerate() {
        let mut analytic = g
            .grad(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(problem.inputs[i].shape().to_vec()))
            .into_data();
        if perturb {
            analytic[0] = analytic[0] * 1.01 + 1e-2;
        }
        let numeric = finite_difference_grad(
            |x| {
                let mut h = Graph::new();
                let consts = problem
                    .inputs
                    .iter()
                    .enumerate()
                    .map(|(j, t)| h.constant(if j == i { x.clone() } else { t.clone() }))
                    .collect::<Result<Vec<_>>>()?;
                let out = (problem.build)(&mut h, &consts)?;
                let loss = objective(&mut h, out, cotangent_seed)?;
                Ok::<_, Error>(h.value(loss).item())
            },
            &problem.inputs[i],
            DEFAULT_STEP,
        )?;
        worst = worst.max(max_relative_error(&analytic, numeric.data()));
    }
    Ok(worst)
}

/// Largest deviation of the autodiff attention gradient from `(2/N)(A - M)`.
pub fn attention_closed_form(pairs: usize) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for seed in 0..pairs as u64 {
        let mut rng = stream_rng(seed, "attention_closed_form", 0);
        let (h, w) = (rng.random_range(1..=8), rng.random_range(1..=8));
        let heat = uniform(&mut rng, &[h, w], 0.0, 1.0);
        let mask = binary(&mut rng, &[h, w]);
        let mut g = Graph::new();
        let a = g.param(heat.clone())?;
        let m = g.constant(mask.clone())?;
        let loss = losses::attention_mse(&mut g, a, m)?;
        g.backward(loss)?;
        let n = (h * w) as f64;
        let grad = g.grad(a).expect("heatmap is a parameter");
        for ((&gv, &av), &mv) in grad.data().iter().zip(heat.data()).zip(mask.data()) {
            worst = worst.max((gv - 2.0 / n * (av - mv)).abs());
        }
    }
    Ok(worst)
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::from_parts(shape.to_vec(), data)
}

fn binary(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| if rng.random_bool(0.3) { 1.0 } else { 0.0 }).collect();
    Tensor::from_parts(shape.to_vec(), data)
}

/// Magnitudes in `[lo, hi)` with random signs, keeping clear of zero.
fn signed(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v = rng.random_range(lo..hi);
            if rng.random_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::from_parts(shape.to_vec(), data)
}

/// Distinct values spaced about 0.1 apart in random order, so selections
/// (max, min, pooling) never flip under a finite-difference step.
fn separated(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut data: Vec<f64> = (0..n)
        .map(|i| -0.05 * n as f64 + 0.1 * i as f64 + rng.random_range(-0.02..0.02))
        .collect();
    data.shuffle(rng);
    Tensor::from_parts(shape.to_vec(), data)
}

fn small_shape(rng: &mut ChaCha8Rng) -> Vec<usize> {
    match rng.random_range(0..3) {
        0 => vec![rng.random_range(1..=6)],
        1 => vec![rng.random_range(1..=4), rng.random_range(1..=4)],
        _ => vec![rng.random_range(1..=3), rng.random_range(1..=3), rng.random_range(1..=3)],
    }
}

fn binary_problem(
    rng: &mut ChaCha8Rng,
    rhs: impl Fn(&mut ChaCha8Rng, &[usize]) -> Tensor<f64>,
    op: fn(&mut Graph<f64>, Var, Var) -> Result<Var>,
) -> Problem {
    let shape = small_shape(rng);
    let a = uniform(rng, &shape, -2.0, 2.0);
    // Every third configuration broadcasts a one-element right operand.
    let b_shape = if rng.random_range(0..3) == 0 { vec![1] } else { shape };
    let b = rhs(rng, &b_shape);
    Problem {
        inputs: vec![a, b],
        build: Box::new(move |g, v| op(g, v[0], v[1])),
    }
}

fn gen_add(rng: &mut ChaCha8Rng) -> Result<Problem> {
    Ok(binary_problem(rng, |r, s| uniform(r, s, -2.0, 2.0), |g, a, b| g.add(a, b)))
}

fn gen_sub(rng: &mut ChaCha8Rng) -> Result<Problem> {
    Ok(binary_problem(rng, |r, s| uniform(r, s, -2.0, 2.0), |g, a, b| g.sub(a, b)))
}

fn gen_mul(rng: &mut ChaCha8Rng) -> Result<Problem> {
    Ok(binary_problem(rng, |r, s| uniform(r, s, -2.0, 2.0), |g, a, b| g.mul(a, b)))
}

fn gen_div(rng: &mut ChaCha8Rng) -> Result<Problem> {
    Ok(binary_problem(
        rng,
        |r, s| signed(r, s, 0.5, 2.0),
        |g, a, b| g.div(a, b),
    ))
}

fn gen_scale(rng: &mut ChaCha8Rng) -> Result<Problem> {
    let shape = small_shape(rng);
    let factor = rng.random_range(-3.0..3.0);
    Ok(Problem {
        inputs: vec![uniform(rng, &shape, -2.0, 2.0)],
        build: Box::new(move |g, v| g.scale(v[0], factor)),
    })
}

fn gen_offset(rng: &mut ChaCha8Rng) -> Result<Problem> {
    let shape = small_shape(rng);
    let shift = rng.random_range(-3.0..3.0);
    Ok(Problem {
        inputs: vec![uniform(rng, &shape, -2.0, 2.0)],
        build: Box::new(move |g, v| g.offset(v[0], shift)),
    })
}

fn gen_matmul(rng: &mut ChaCha8Rng) -> Result<Problem> {
    let (m, k, n) = (rng.random_range(1..=4), rng.random_range(1..=4), rng.random_range(1..=4));
    Ok(Problem {
        inputs: vec![uniform(rng, &[m, k], -1.0, 1.0), uniform(rng, &[k, n], -1.0, 1.0)],
        build: Box::new(|g, v| g.matmul(v[0], v[1])),
    })
}

fn gen_conv2d(rng: &mut ChaCha8Rng) -> Result<Problem> {
    let c = rng.random_range(1..=3);
    let o = rng.random_range(1..=3);
    let k = if rng.random_bool(0.5) { 3 } else { 1 };
    let (h, w) = (rng.random_range(k..=6), rng.random_range(k..=6));
    let params = Conv2dParams {
        stride: rng.random_range(1..=2),
        padding: rng.random_range(0..=1),
    };
    let with_bias = rng.random_bool(0.7);
    let mut inputs = vec![uniform(rng, &[c, h, w], -1.0, 1.0), uniform(rng, &[o, c, k, k], -1.0, 1.0)];
    if with_bias {
        inputs.push(uniform(rng, &[o], -1.0, 1.0));
    }
    Ok(Problem {
        inputs,
        build: Box::new(move |g, v| g.conv2d(v[0], v[1], v.get(2).copied(), params)),
    })
}

fn gen_max_pool(rng: &mut ChaCha8Rng) -> Result<Problem> {
    let size = rng.random_range(1..=2);
    let shape = [rng.random_range(1..=3), size * rng.random_range(1..=3), size * rng.random_range(1..=3)];
    Ok(Problem {
        inputs: vec![separated(rng, &shape)],
        build: Box::new(move |g, v| g.max_pool2d(v[0], size)),
    })
}

fn gen_relu(rng: &mut ChaCha8Rng) -> Result<Problem> {
    let shape = small_shape(rng);
    Ok(Problem {
        inputs: vec![signed(rng, &shape, 0.1, 2.0)],
        build: Box::new(|g, v| g.relu(v[0])),
    })
}

fn gen_exp(rng: &mut ChaCha8Rng) -> Result<Problem> {
    let shape = small_shape(rng);
    Ok(Problem {
        inputs: vec![uniform(rng, &shape, -2.0, 2.0)],
        build: Box::new(|g, v| g.exp(v[0])),
    })
}

fn gen_log(rng: &mut ChaCha8Rng) -> Result<Problem> {
    let shape = small_shape(rng);
    Ok(Problem {
        inputs: vec![uniform(rng, &shape, 0.2, 3.0)],
        build: Box::new(|g, v| g.log(v[0])),
    })
}

fn gen_reshape(rng: &mut ChaCha8Rng) -> Result<Problem> {
    let (a, b) = (rng.random_range(1..=4), rng.random_range(1..=4));
    Ok(Problem {
        inputs: vec![uniform(rng, &[a, b], -2.0, 2.0)],
        build: Box::new(move |g, v| g.reshape(v[0], &[b, a])),
    })
}

fn gen_gap(rng: &mut ChaCha8Rng) -> Result<Problem> {
    let shape = [rng.random_range(1..=3), rng.random_range(1..=4), rng.random_range(1..=4)];
    Ok(Problem {
        inputs: vec![uniform(rng, &shape, -2.0, 2.0)],
        build: Box::new(|g, v| g.global_avg_pool(v[0])),
    })
}

fn gen_sum(rng: &mut ChaCha8Rng) -> Result<Problem> {
    let shape = small_shape(rng);
    Ok(Problem {
        inputs: vec![uniform(rng, &shape, -2.0, 2.0)],
        build: Box::new(|g, v| g.sum(v[0])),
    })
}

fn gen_mean(rng: &mut ChaCha8Rng) -> Result<Problem> {
    let shape = small_shape(rng);
    Ok(Problem {
        inputs: vec![uniform(rng, &shape, -2.0, 2.0)],
        build: Box::new(|g, v| g.mean(v[0])),
    })
}

fn gen_max(rng: &mut ChaCha8Rng) -> Result<Problem> {
    let shape = small_shape(rng);
    Ok(Problem {
        inputs: vec![separated(rng, &shape)],
        build: Box::new(|g, v| g.max(v[0])),
    })
}

fn gen_min(rng: &mut ChaCha8Rng) -> Result<Problem> {
    let shape = small_shape(rng);
    Ok(Problem {
        inputs: vec![separated(rng, &shape)],
        build: Box::new(|g, v| g.min(v[0])),
    })
}

fn temperature(rng: &mut ChaCha8Rng) -> f64 {
    [0.5, 1.0, 3.0, 10.0][rng.random_range(0..4)]
}

fn gen_softmax(rng: &mut ChaCha8Rng) -> Result<Problem> {
    let k = rng.random_range(2..=6);
    let t = temperature(rng);
    Ok(Problem {
        inputs: vec![uniform(rng, &[k], -3.0, 3.0)],
        build: Box::new(move |g, v| losses::softmax_t(g, v[0], t)),
    })
}

fn gen_kl(rng: &mut ChaCha8Rng) -> Result<Problem> {
    let k = rng.random_range(2..=6);
    let t = temperature(rng);
    let teacher = uniform(rng, &[k], -3.0, 3.0);
    Ok(Problem {
        inputs: vec![uniform(rng, &[k], -3.0, 3.0)],
        build: Box::new(move |g, v| {
            let tv = g.constant(teacher.clone())?;
            losses::kl_distill(g, tv, v[0], t)
        }),
    })
}

fn gen_ce(rng: &mut ChaCha8Rng) -> Result<Problem> {
    let k = rng.random_range(2..=6);
    let label = rng.random_range(0..k);
    Ok(Problem {
        inputs: vec![uniform(rng, &[k], -3.0, 3.0)],
        build: Box::new(move |g, v| losses::cross_entropy(g, v[0], label)),
    })
}

fn gen_attention_mse(rng: &mut ChaCha8Rng) -> Result<Problem> {
    let shape = [rng.random_range(1..=6), rng.random_range(1..=6)];
    let mask = binary(rng, &shape);
    Ok(Problem {
        inputs: vec![uniform(rng, &shape, 0.05, 0.95)],
        build: Box::new(move |g, v| {
            let m = g.constant(mask.clone())?;
            losses::attention_mse(g, v[0], m)
        }),
    })
}

fn gen_total(rng: &mut ChaCha8Rng) -> Result<Problem> {
    let weights = LossWeights {
        alpha: rng.random_range(0.0..1.0),
        beta: rng.random_range(0.0..1.0),
        theta: rng.random_range(0.0..1.0),
        temperature: 1.0,
    };
    let inputs = (0..3).map(|_| Tensor::scalar(rng.random_range(0.0..3.0))).collect();
    Ok(Problem {
        inputs,
        build: Box::new(move |g, v| losses::total_loss(g, v[0], v[1], v[2], &weights)),
    })
}

fn gen_normalize(rng: &mut ChaCha8Rng) -> Result<Problem> {
    let shape = [rng.random_range(1..=4), rng.random_range(2..=4)];
    Ok(Problem {
        inputs: vec![separated(rng, &shape)],
        build: Box::new(|g, v| min_max_normalize(g, v[0])),
    })
}

fn gen_upsample(rng: &mut ChaCha8Rng) -> Result<Problem> {
    let (h, w) = (rng.random_range(1..=4), rng.random_range(1..=4));
    let target = (h + rng.random_range(0..=4), w + rng.random_range(0..=4));
    Ok(Problem {
        inputs: vec![uniform(rng, &[h, w], 0.0, 1.0)],
        build: Box::new(move |g, v| upsample_bilinear_var(g, v[0], target)),
    })
}

/// Activations -> detached-weight heatmap -> normalize -> upsample -> MSE to a mask.
fn gen_gradcam_chain(rng: &mut ChaCha8Rng) -> Result<Problem> {
    let c = rng.random_range(1..=4);
    let (h, w) = (rng.random_range(2..=4), rng.random_range(2..=4));
    let target = (h * 2, w * 2);
    let weights = uniform(rng, &[c], -1.0, 1.0);
    let mask = binary(rng, &[target.0, target.1]);
    // Activations are post-ReLU in the model, so keep them positive.
    let acts = uniform(rng, &[c, h, w], 0.05, 1.0);
    Ok(Problem {
        inputs: vec![acts],
        build: Box::new(move |g, v| {
            let map = gradcam_heatmap_var(g, v[0], &weights)?;
            let up = upsample_bilinear_var(g, map, target)?;
            let m = g.constant(mask.clone())?;
            losses::attention_mse(g, up, m)
        }),
    })
}

fn tiny_model(rng: &mut ChaCha8Rng) -> Result<(ConvClassifier<f64>, Tensor<f64>, usize)> {
    let config = ConvNetConfig {
        input_shape: (1, 8, 8),
        conv_blocks: vec![
            ConvBlock {
                out_channels: 2,
                kernel_size: 3,
                pool: true,
            },
            ConvBlock {
                out_channels: 3,
                kernel_size: 3,
                pool: false,
            },
        ],
        num_classes: 3,
        attention_layer_index: 1,
        init_seed: rng.random(),
    };
    let mut model = ConvClassifier::<f64>::init(config)?;
    // Nonzero biases so no unit sits exactly on a ReLU kink.
    for p in model.params_mut() {
        if p.shape().len() == 1 {
            for v in p.data_mut() {
                *v = rng.random_range(-0.2..0.2);
            }
        }
    }
    let image = uniform(rng, &[1, 8, 8], -0.5, 0.5);
    let label = rng.random_range(0..3);
    Ok((model, image, label))
}

fn model_problem(
    rng: &mut ChaCha8Rng,
    loss: impl Fn(&mut Graph<f64>, Var, Var, usize) -> Result<Var> + 'static,
) -> Result<Problem> {
    let (model, image, label) = tiny_model(rng)?;
    Ok(Problem {
        inputs: model.params().to_vec(),
        build: Box::new(move |g, v| {
            let bound = BoundParams { vars: v.to_vec() };
            let x = g.constant(image.clone())?;
            let out = model.forward(g, &bound, x)?;
            loss(g, out.logits, out.activations, label)
        }),
    })
}

fn gen_model_ce(rng: &mut ChaCha8Rng) -> Result<Problem> {
    model_problem(rng, |g, logits, _, label| losses::cross_entropy(g, logits, label))
}

fn gen_model_kl(rng: &mut ChaCha8Rng) -> Result<Problem> {
    let teacher = uniform(rng, &[3], -3.0, 3.0);
    let t = temperature(rng);
    model_problem(rng, move |g, logits, _, _| {
        let tv = g.constant(teacher.clone())?;
        losses::kl_distill(g, tv, logits, t)
    })
}

/// Grad-CAM weights for the model at its initial parameters, held fixed
/// while the parameters are perturbed.
fn fixed_cam_weights(rng: &mut ChaCha8Rng) -> Tensor<f64> {
    uniform(rng, &[3], -1.0, 1.0)
}

fn gen_model_attention(rng: &mut ChaCha8Rng) -> Result<Problem> {
    let weights = fixed_cam_weights(rng);
    let mask = binary(rng, &[8, 8]);
    model_problem(rng, move |g, _, acts, _| {
        let map = gradcam_heatmap_var(g, acts, &weights)?;
        let up = upsample_bilinear_var(g, map, (8, 8))?;
        let m = g.constant(mask.clone())?;
        losses::attention_mse(g, up, m)
    })
}

fn gen_model_total(rng: &mut ChaCha8Rng) -> Result<Problem> {
    let weights = fixed_cam_weights(rng);
    let mask = binary(rng, &[8, 8]);
    let teacher = uniform(rng, &[3], -3.0, 3.0);
    let loss_weights = LossWeights::default();
    model_problem(rng, move |g, logits, acts, label| {
        let map = gradcam_heatmap_var(g, acts, &weights)?;
        let up = upsample_bilinear_var(g, map, (8, 8))?;
        let m = g.constant(mask.clone())?;
        let attn = losses::attention_mse(g, up, m)?;
        let tv = g.constant(teacher.clone())?;
        let dist = losses::kl_distill(g, tv, logits, loss_weights.temperature)?;
        let cls = losses::cross_entropy(g, logits, label)?;
        losses::total_loss(g, attn, dist, cls, &loss_weights)
    })
}
