//! Python bindings: tensors, the synthetic dataset, models, losses, Grad-CAM,
//! training and metrics. Images and maps cross the boundary as [`PyTensor`]
//! (shape plus flat row-major data in f64).

use std::collections::BTreeMap;
use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use spatialkd::gradcam::{self, AttentionMap, RoiMask};
use spatialkd::harness::{self, Metrics, Mode, OptimizerKind, TrainConfig};
use spatialkd::losses::{self, LossWeights};
use spatialkd::model::{ConvClassifier, ConvNetConfig};
use spatialkd::synthdata::{self, Dataset, SynthConfig};
use spatialkd::{Error, Graph, Tensor};

fn to_py(e: Error) -> PyErr {
    if e.is_data_error() {
        PyIOError::new_err(e.to_string())
    } else {
        PyValueError::new_err(e.to_string())
    }
}

/// Dense tensor: `shape` and row-major `data`.
#[pyclass(name = "Tensor", from_py_object)]
#[derive(Clone)]
pub struct PyTensor {
    inner: Tensor<f64>,
}

#[pymethods]
impl PyTensor {
    #[new]
    fn new(shape: Vec<usize>, data: Vec<f64>) -> PyResult<Self> {
        Ok(PyTensor {
            inner: Tensor::new(shape, data).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn zeros(shape: Vec<usize>) -> Self {
        PyTensor {
            inner: Tensor::zeros(shape),
        }
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.inner.shape().to_vec()
    }

    #[getter]
    fn data(&self) -> Vec<f64> {
        self.inner.data().to_vec()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!("Tensor(shape={:?})", self.inner.shape())
    }
}

impl PyTensor {
    fn f32(&self) -> Tensor<f32> {
        self.inner.cast()
    }

    fn wrap<F: spatialkd::Real>(t: &Tensor<F>) -> Self {
        PyTensor { inner: t.cast() }
    }
}

/// Parameters of the synthetic staging dataset.
#[pyclass(name = "SynthConfig", from_py_object)]
#[derive(Clone)]
pub struct PySynthConfig {
    inner: SynthConfig,
}

#[pymethods]
impl PySynthConfig {
    #[new]
    #[pyo3(signature = (samples_per_class=100, noise_sigma=0.05, distractor_count=3, folds=5, master_seed=0, clinical_proportions=false))]
    fn new(
        samples_per_class: usize,
        noise_sigma: f64,
        distractor_count: usize,
        folds: usize,
        master_seed: u64,
        clinical_proportions: bool,
    ) -> PyResult<Self> {
        let inner = SynthConfig {
            samples_per_class,
            noise_sigma,
            distractor_count,
            folds,
            master_seed,
            clinical_proportions,
            ..SynthConfig::default()
        };
        inner.validate().map_err(to_py)?;
        Ok(PySynthConfig { inner })
    }

    #[getter]
    fn image_size(&self) -> (usize, usize) {
        self.inner.image_size
    }

    #[getter]
    fn class_counts(&self) -> Vec<usize> {
        self.inner.class_counts().to_vec()
    }

    fn __repr__(&self) -> String {
        format!("{:?}", self.inner)
    }
}

/// One generated sample.
#[pyclass(name = "Sample", skip_from_py_object)]
pub struct PySample {
    #[pyo3(get)]
    id: String,
    /// Stage 1 to 5.
    #[pyo3(get)]
    label: u8,
    #[pyo3(get)]
    fold: Option<usize>,
    /// `(row, col, height, width)`.
    #[pyo3(get)]
    bbox: (usize, usize, usize, usize),
    #[pyo3(get)]
    full_image: PyTensor,
    #[pyo3(get)]
    cropped_image: PyTensor,
    #[pyo3(get)]
    mask: PyTensor,
}

#[pyclass(name = "Dataset", skip_from_py_object)]
pub struct PyDataset {
    inner: Dataset,
}

#[pymethods]
impl PyDataset {
    fn __len__(&self) -> usize {
        self.inner.samples.len()
    }

    fn sample(&self, index: usize) -> PyResult<PySample> {
        let s = self
            .inner
            .samples
            .get(index)
            .ok_or_else(|| PyValueError::new_err(format!("index {index} out of range")))?;
        let b = s.entry.bbox;
        Ok(PySample {
            id: s.id().to_string(),
            label: s.entry.label,
            fold: s.entry.fold,
            bbox: (b.row, b.col, b.height, b.width),
            full_image: PyTensor::wrap(&s.full_image),
            cropped_image: PyTensor::wrap(&s.cropped_image),
            mask: PyTensor::wrap(s.mask.values()),
        })
    }

    /// Sample ids in fold `fold`.
    fn fold_ids(&self, fold: usize) -> PyResult<Vec<String>> {
        let (_, eval) = harness::fold_split(&self.inner, fold).map_err(to_py)?;
        Ok(eval.iter().map(|s| s.id().to_string()).collect())
    }
}

/// Builds a dataset in memory, or writes it too when `out` is given.
#[pyfunction]
#[pyo3(signature = (config, out=None))]
fn generate(py: Python<'_>, config: PySynthConfig, out: Option<PathBuf>) -> PyResult<PyDataset> {
    let inner = py
        .detach(|| match out {
            Some(dir) => synthdata::generate(&config.inner, &dir),
            None => synthdata::build(&config.inner),
        })
        .map_err(to_py)?;
    Ok(PyDataset { inner })
}

#[pyfunction]
fn load_dataset(path: PathBuf) -> PyResult<PyDataset> {
    Ok(PyDataset {
        inner: synthdata::load(&path).map_err(to_py)?,
    })
}

fn parse_mode(mode: &str) -> PyResult<Mode> {
    match mode {
        "teacher" => Ok(Mode::Teacher),
        "student-baseline" => Ok(Mode::StudentBaseline),
        "student-distilled" => Ok(Mode::StudentDistilled),
        other => Err(PyValueError::new_err(format!("unknown mode {other:?}"))),
    }
}

/// The shared teacher/student CNN (f32 weights).
#[pyclass(name = "Model", from_py_object)]
#[derive(Clone)]
pub struct PyModel {
    inner: ConvClassifier<f32>,
}

#[pymethods]
impl PyModel {
    /// Fresh model with the default architecture.
    #[new]
    #[pyo3(signature = (init_seed=0))]
    fn new(init_seed: u64) -> PyResult<Self> {
        let config = ConvNetConfig {
            init_seed,
            ..ConvNetConfig::default()
        };
        Ok(PyModel {
            inner: ConvClassifier::init(config).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (inner, _) = ConvClassifier::load_checkpoint_with_manifest(&path).map_err(to_py)?;
        Ok(PyModel { inner })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save_checkpoint(&path, &BTreeMap::new()).map_err(to_py)
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.inner.num_parameters()
    }

    #[getter]
    fn attention_shape(&self) -> (usize, usize, usize) {
        self.inner.config().attention_shape()
    }

    /// Logits for a raw `(1, H, W)` image.
    fn logits(&self, image: &PyTensor) -> PyResult<Vec<f32>> {
        self.inner.logits(&image.f32()).map_err(to_py)
    }

    fn predict(&self, image: &PyTensor) -> PyResult<usize> {
        self.inner.predict(&image.f32()).map_err(to_py)
    }

    /// Grad-CAM map for `label` (zero-based), upsampled to `target`.
    #[pyo3(signature = (image, label, target=(64, 64)))]
    fn attention(&self, image: &PyTensor, label: usize, target: (usize, usize)) -> PyResult<PyTensor> {
        let map = gradcam::student_attention(&self.inner, &image.f32(), label, target).map_err(to_py)?;
        Ok(PyTensor::wrap(&map.values))
    }
}

/// Trains one model on `dataset`, leaving fold `fold` out when given.
/// Returns the model and the per-epoch log as a list of dicts.
#[pyfunction]
#[pyo3(signature = (
    dataset, mode="student-baseline", teacher=None, fold=None, epochs=30, batch_size=8,
    learning_rate=1e-3, alpha=0.01, beta=0.8, theta=0.2, temperature=3.0, seed=0, sgd=false
))]
#[allow(clippy::too_many_arguments)]
fn train<'py>(
    py: Python<'py>,
    dataset: &PyDataset,
    mode: &str,
    teacher: Option<&PyModel>,
    fold: Option<usize>,
    epochs: usize,
    batch_size: usize,
    learning_rate: f64,
    alpha: f64,
    beta: f64,
    theta: f64,
    temperature: f64,
    seed: u64,
    sgd: bool,
) -> PyResult<(PyModel, Vec<BTreeMap<&'static str, f64>>)> {
    let config = TrainConfig {
        loss_weights: LossWeights {
            alpha,
            beta,
            theta,
            temperature,
        },
        epochs,
        batch_size,
        learning_rate,
        optimizer: if sgd { OptimizerKind::SgdMomentum } else { OptimizerKind::Adam },
        seed,
        mode: parse_mode(mode)?,
        folds: dataset.inner.config.folds,
    };
    let ds = &dataset.inner;
    let samples = match fold {
        Some(f) => harness::fold_split(ds, f).map_err(to_py)?.0,
        None => ds.samples.iter().collect(),
    };
    let (h, w) = ds.image_size();
    let model_config = ConvNetConfig {
        input_shape: (1, h, w),
        ..ConvNetConfig::default()
    };
    let teacher = teacher.map(|t| t.inner.clone());
    let out = py
        .detach(|| harness::train(&samples, &model_config, &config, teacher.as_ref()))
        .map_err(to_py)?;
    let log = out
        .log
        .iter()
        .map(|l| {
            BTreeMap::from([
                ("epoch", l.epoch as f64),
                ("L_total", l.total),
                ("L_attn", l.attn),
                ("L_dist", l.dist),
                ("L_cls", l.cls),
                ("train_acc", l.train_acc),
            ])
        })
        .collect();
    Ok((PyModel { inner: out.model }, log))
}

#[pyclass(name = "Metrics", skip_from_py_object)]
pub struct PyMetrics {
    #[pyo3(get)]
    accuracy: f64,
    #[pyo3(get)]
    precision: f64,
    #[pyo3(get)]
    recall: f64,
    #[pyo3(get)]
    f1: f64,
    #[pyo3(get)]
    confusion: Vec<Vec<usize>>,
}

impl From<Metrics> for PyMetrics {
    fn from(m: Metrics) -> Self {
        PyMetrics {
            accuracy: m.accuracy,
            precision: m.precision,
            recall: m.recall,
            f1: m.f1,
            confusion: m.confusion,
        }
    }
}

#[pymethods]
impl PyMetrics {
    fn __repr__(&self) -> String {
        format!(
            "Metrics(acc={:.4}, prec={:.4}, rec={:.4}, f1={:.4})",
            self.accuracy, self.precision, self.recall, self.f1
        )
    }
}

/// Weighted metrics from zero-based labels.
#[pyfunction]
fn metrics(num_classes: usize, truth: Vec<usize>, predicted: Vec<usize>) -> PyResult<PyMetrics> {
    Ok(Metrics::from_predictions(num_classes, &truth, &predicted).map_err(to_py)?.into())
}

/// Evaluates `model` on fold `fold` (or every sample) of `dataset`.
#[pyfunction]
#[pyo3(signature = (model, dataset, mode="student-baseline", fold=None))]
fn evaluate(model: &PyModel, dataset: &PyDataset, mode: &str, fold: Option<usize>) -> PyResult<PyMetrics> {
    let samples = match fold {
        Some(f) => harness::fold_split(&dataset.inner, f).map_err(to_py)?.1,
        None => dataset.inner.samples.iter().collect(),
    };
    Ok(harness::evaluate(&model.inner, &samples, parse_mode(mode)?).map_err(to_py)?.into())
}

fn logits_pair(g: &mut Graph<f64>, a: Vec<f64>, b: Vec<f64>) -> PyResult<(spatialkd::Var, spatialkd::Var)> {
    let (na, nb) = (a.len(), b.len());
    let a = g.constant(Tensor::new(vec![na], a).map_err(to_py)?).map_err(to_py)?;
    let b = g.param(Tensor::new(vec![nb], b).map_err(to_py)?).map_err(to_py)?;
    Ok((a, b))
}

/// `softmax(z / T)`.
#[pyfunction]
#[pyo3(signature = (logits, temperature=1.0))]
fn softmax_t(logits: Vec<f64>, temperature: f64) -> PyResult<Vec<f64>> {
    losses::softmax_values(&logits, temperature).map_err(to_py)
}

/// `T^2 KL(softmax(teacher/T) || softmax(student/T))` and its gradient
/// with respect to the student logits.
#[pyfunction]
#[pyo3(signature = (teacher, student, temperature=3.0))]
fn kl_distill(teacher: Vec<f64>, student: Vec<f64>, temperature: f64) -> PyResult<(f64, Vec<f64>)> {
    let mut g = Graph::new();
    let (t, s) = logits_pair(&mut g, teacher, student)?;
    let loss = losses::kl_distill(&mut g, t, s, temperature).map_err(to_py)?;
    let grad = g.gradient_wrt(loss, s).map_err(to_py)?;
    Ok((g.value(loss).item(), grad.into_data()))
}

/// Cross-entropy against a zero-based label, with its logit gradient.
#[pyfunction]
fn cross_entropy(logits: Vec<f64>, label: usize) -> PyResult<(f64, Vec<f64>)> {
    let mut g = Graph::new();
    let n = logits.len();
    let z = g.param(Tensor::new(vec![n], logits).map_err(to_py)?).map_err(to_py)?;
    let loss = losses::cross_entropy(&mut g, z, label).map_err(to_py)?;
    let grad = g.gradient_wrt(loss, z).map_err(to_py)?;
    Ok((g.value(loss).item(), grad.into_data()))
}

/// Mean squared error between a heatmap and a mask, with the heatmap gradient.
#[pyfunction]
fn attention_mse(heatmap: &PyTensor, mask: &PyTensor) -> PyResult<(f64, PyTensor)> {
    let mut g = Graph::new();
    let a = g.param(heatmap.inner.clone()).map_err(to_py)?;
    let m = g.constant(mask.inner.clone()).map_err(to_py)?;
    let loss = losses::attention_mse(&mut g, a, m).map_err(to_py)?;
    let grad = g.gradient_wrt(loss, a).map_err(to_py)?;
    Ok((g.value(loss).item(), PyTensor { inner: grad }))
}

/// Channel weights: spatial mean of a `(C, h, w)` gradient.
#[pyfunction]
fn gradcam_weights(grad: &PyTensor) -> PyResult<Vec<f64>> {
    Ok(gradcam::gradcam_weights(&grad.inner).map_err(to_py)?.into_data())
}

/// Min-max normalized `sum_c w_c A_c`.
#[pyfunction]
fn gradcam_heatmap(activations: &PyTensor, weights: Vec<f64>) -> PyResult<PyTensor> {
    let n = weights.len();
    let w = Tensor::new(vec![n], weights).map_err(to_py)?;
    let map = gradcam::gradcam_heatmap(&activations.inner, &w).map_err(to_py)?;
    Ok(PyTensor { inner: map.values })
}

/// Aligned-corner bilinear resize of a 2-D map.
#[pyfunction]
fn upsample_bilinear(map: &PyTensor, target: (usize, usize)) -> PyResult<PyTensor> {
    let s = map.inner.shape();
    let src = if s.len() == 2 { (s[0], s[1]) } else { (0, 0) };
    let m = AttentionMap::new(map.inner.clone(), src).map_err(to_py)?;
    Ok(PyTensor {
        inner: gradcam::upsample_bilinear(&m, target).map_err(to_py)?.values,
    })
}

/// Share of heatmap mass inside a binary mask.
#[pyfunction]
fn overlap_score(map: &PyTensor, mask: &PyTensor) -> PyResult<f64> {
    let s = map.inner.shape();
    let src = if s.len() == 2 { (s[0], s[1]) } else { (0, 0) };
    let m = AttentionMap::new(map.inner.clone(), src).map_err(to_py)?;
    let mask = RoiMask::from_tensor(&mask.inner).map_err(to_py)?;
    gradcam::overlap_score(&m, &mask).map_err(to_py)
}

/// Runs the finite-difference suite; one dict per check.
#[pyfunction]
#[pyo3(signature = (op=None, configurations=20))]
fn gradcheck(py: Python<'_>, op: Option<String>, configurations: usize) -> PyResult<Vec<(String, f64, bool)>> {
    let reports = py
        .detach(|| spatialkd::gradcheck::suite::run(configurations, op.as_deref(), None))
        .map_err(to_py)?;
    Ok(reports
        .into_iter()
        .map(|r| (r.op, r.max_relative_error, r.passed))
        .collect())
}

/// Runs the command-line interface with `args` (without the program name).
#[pyfunction]
fn run_cli(py: Python<'_>, args: Vec<String>) -> u8 {
    let argv: Vec<String> = std::iter::once("spatialkd".to_string()).chain(args).collect();
    py.detach(|| spatialkd::cli::run_from(argv))
}

#[pymodule]
fn spatialkd_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTensor>()?;
    m.add_class::<PySynthConfig>()?;
    m.add_class::<PySample>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyMetrics>()?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(load_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(metrics, m)?)?;
    m.add_function(wrap_pyfunction!(softmax_t, m)?)?;
    m.add_function(wrap_pyfunction!(kl_distill, m)?)?;
    m.add_function(wrap_pyfunction!(cross_entropy, m)?)?;
    m.add_function(wrap_pyfunction!(attention_mse, m)?)?;
    m.add_function(wrap_pyfunction!(gradcam_weights, m)?)?;
    m.add_function(wrap_pyfunction!(gradcam_heatmap, m)?)?;
    m.add_function(wrap_pyfunction!(upsample_bilinear, m)?)?;
    m.add_function(wrap_pyfunction!(overlap_score, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    Ok(())
}
