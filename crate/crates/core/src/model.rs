//! The convolutional classifier shared by teacher and student.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::container;
use crate::error::{Error, Result};
use crate::tape::{Conv2dParams, Graph, Var};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvBlock {
    pub out_channels: usize,
    pub kernel_size: usize,
    /// 2x2 max-pool after the activation.
    pub pool: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvNetConfig {
    /// `(channels, height, width)`.
    pub input_shape: (usize, usize, usize),
    pub conv_blocks: Vec<ConvBlock>,
    pub num_classes: usize,
    /// Block whose post-ReLU output feeds Grad-CAM.
    pub attention_layer_index: usize,
    pub init_seed: u64,
}

impl Default for ConvNetConfig {
    fn default() -> Self {
        let block = |out_channels, pool| ConvBlock {
            out_channels,
            kernel_size: 3,
            pool,
        };
        ConvNetConfig {
            input_shape: (1, 64, 64),
            conv_blocks: vec![block(8, true), block(16, true), block(32, false)],
            num_classes: 5,
            attention_layer_index: 2,
            init_seed: 0,
        }
    }
}

impl ConvNetConfig {
    pub fn validate(&self) -> Result<()> {
        let (c, h, w) = self.input_shape;
        if c != 1 || h == 0 || w == 0 {
            return Err(Error::Config(format!(
                "input shape must be (1, H, W) with H, W > 0, got {:?}",
                self.input_shape
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::Config(format!(
                "need at least 2 classes, got {}",
                self.num_classes
            )));
        }
        if self.conv_blocks.is_empty() {
            return Err(Error::Config("need at least one conv block".into()));
        }
        if self.attention_layer_index >= self.conv_blocks.len() {
            return Err(Error::Config(format!(
                "attention layer index {} out of range for {} blocks",
                self.attention_layer_index,
                self.conv_blocks.len()
            )));
        }
        for (i, b) in self.conv_blocks.iter().enumerate() {
            if b.out_channels == 0 || b.kernel_size == 0 || b.kernel_size % 2 == 0 {
                return Err(Error::Config(format!(
                    "block {i}: need positive channels and an odd kernel size, got {b:?}"
                )));
            }
        }
        let (mut h, mut w) = (h, w);
        for (i, b) in self.conv_blocks.iter().enumerate() {
            if b.pool {
                h /= 2;
                w /= 2;
            }
            if h == 0 || w == 0 {
                return Err(Error::Config(format!(
                    "spatial size collapses to zero after block {i}"
                )));
            }
        }
        Ok(())
    }

    /// `(channels, height, width)` of the attention activations.
    pub fn attention_shape(&self) -> (usize, usize, usize) {
        let (_, mut h, mut w) = self.input_shape;
        for b in &self.conv_blocks[..self.attention_layer_index] {
            if b.pool {
                h /= 2;
                w /= 2;
            }
        }
        (self.conv_blocks[self.attention_layer_index].out_channels, h, w)
    }

    /// Parameter names and shapes in storage order.
    pub fn parameter_layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut layout = Vec::new();
        let mut in_ch = self.input_shape.0;
        for (i, b) in self.conv_blocks.iter().enumerate() {
            let k = b.kernel_size;
            layout.push((format!("conv{i}.weight"), vec![b.out_channels, in_ch, k, k]));
            layout.push((format!("conv{i}.bias"), vec![b.out_channels]));
            in_ch = b.out_channels;
        }
        layout.push(("head.weight".into(), vec![self.num_classes, in_ch]));
        layout.push(("head.bias".into(), vec![self.num_classes]));
        layout
    }
}

/// Graph handles for a model's parameters.
#[derive(Debug, Clone)]
pub struct BoundParams {
    pub vars: Vec<Var>,
}

/// Outputs of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardOutput {
    pub logits: Var,
    pub activations: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvClassifier<F> {
    config: ConvNetConfig,
    params: Vec<Tensor<F>>,
}

impl<F: Real> ConvClassifier<F> {
    /// He-normal weights (std `sqrt(2 / fan_in)`), zero biases.
    pub fn init(config: ConvNetConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let params = config
            .parameter_layout()
            .into_iter()
            .map(|(name, shape)| {
                if name.ends_with(".bias") {
                    return Tensor::zeros(shape);
                }
                let fan_in: usize = shape[1..].iter().product();
                let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
                let n = shape.iter().product();
                let data = (0..n).map(|_| F::from_f64(normal.sample(&mut rng))).collect();
                Tensor::from_parts(shape, data)
            })
            .collect();
        Ok(ConvClassifier { config, params })
    }

    pub fn from_parts(config: ConvNetConfig, params: Vec<Tensor<F>>) -> Result<Self> {
        config.validate()?;
        let layout = config.parameter_layout();
        if layout.len() != params.len() {
            return Err(Error::Config(format!(
                "expected {} parameter tensors, got {}",
                layout.len(),
                params.len()
            )));
        }
        for ((name, shape), p) in layout.iter().zip(&params) {
            if p.shape() != shape.as_slice() {
                return Err(Error::Config(format!(
                    "parameter {name}: expected shape {shape:?}, got {:?}",
                    p.shape()
                )));
            }
        }
        Ok(ConvClassifier { config, params })
    }

    pub fn config(&self) -> &ConvNetConfig {
        &self.config
    }

    pub fn params(&self) -> &[Tensor<F>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<F>] {
        &mut self.params
    }

    pub fn param_names(&self) -> Vec<String> {
        self.config.parameter_layout().into_iter().map(|(n, _)| n).collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Registers the parameters on `g`, as trainable leaves or as constants.
    pub fn bind(&self, g: &mut Graph<F>, trainable: bool) -> Result<BoundParams> {
        let vars = self
            .params
            .iter()
            .map(|p| g.leaf(p.clone(), trainable))
            .collect::<Result<_>>()?;
        Ok(BoundParams { vars })
    }

    /// Logits and attention activations for one `(1, H, W)` image.
    pub fn forward(&self, g: &mut Graph<F>, bound: &BoundParams, image: Var) -> Result<ForwardOutput> {
        let (c, h, w) = self.config.input_shape;
        if g.shape(image) != [c, h, w] {
            return Err(Error::shape("forward", g.shape(image), &[c, h, w]));
        }
        let mut x = image;
        let mut activations = None;
        for (i, block) in self.config.conv_blocks.iter().enumerate() {
            let conv = Conv2dParams {
                stride: 1,
                padding: block.kernel_size / 2,
            };
            x = g.conv2d(x, bound.vars[2 * i], Some(bound.vars[2 * i + 1]), conv)?;
            x = g.relu(x)?;
            if i == self.config.attention_layer_index {
                activations = Some(x);
            }
            if block.pool {
                x = g.max_pool2d(x, 2)?;
            }
        }
        let n = self.config.conv_blocks.len();
        let features = g.global_avg_pool(x)?;
        let channels = g.shape(features)[0];
        let column = g.reshape(features, &[channels, 1])?;
        let scores = g.matmul(bound.vars[2 * n], column)?;
        let scores = g.reshape(scores, &[self.config.num_classes])?;
        let logits = g.add(scores, bound.vars[2 * n + 1])?;
        Ok(ForwardOutput {
            logits,
            activations: activations.expect("attention index validated"),
        })
    }

    /// Inference-only logits.
    pub fn logits(&self, image: &Tensor<F>) -> Result<Vec<F>> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false)?;
        let x = g.constant(image.clone())?;
        let out = self.forward(&mut g, &bound, x)?;
        Ok(g.value(out.logits).data().to_vec())
    }

    pub fn predict(&self, image: &Tensor<F>) -> Result<usize> {
        Ok(argmax(&self.logits(image)?))
    }

    /// Writes `manifest.json` plus one container per parameter into `dir`.
    pub fn save_checkpoint(&self, dir: &Path, provenance: &BTreeMap<String, serde_json::Value>) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let parameters = self
            .config
            .parameter_layout()
            .into_iter()
            .zip(&self.params)
            .map(|((name, shape), p)| {
                let file = format!("{name}.dtk");
                container::write(&dir.join(&file), p)?;
                Ok(ParamEntry { name, shape, file })
            })
            .collect::<Result<Vec<_>>>()?;
        let manifest = CheckpointManifest {
            format: CHECKPOINT_FORMAT.into(),
            dtype: format!("{:?}", F::DTYPE).to_lowercase(),
            config: self.config.clone(),
            parameters,
            provenance: provenance.clone(),
        };
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&manifest)?;
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }

    /// Loads a checkpoint and checks it against the expected configuration.
    pub fn load_checkpoint(dir: &Path, config: &ConvNetConfig) -> Result<Self> {
        let (model, _) = Self::load_checkpoint_with_manifest(dir)?;
        if model.config.num_classes != config.num_classes {
            return Err(Error::Config(format!(
                "checkpoint has {} classes, expected {}",
                model.config.num_classes, config.num_classes
            )));
        }
        let mut expected = config.clone();
        expected.init_seed = model.config.init_seed;
        if model.config != expected {
            return Err(Error::Config(format!(
                "checkpoint architecture {:?} does not match {:?}",
                model.config, config
            )));
        }
        Ok(model)
    }

    /// Loads a checkpoint using the configuration recorded in its manifest.
    pub fn load_checkpoint_with_manifest(dir: &Path) -> Result<(Self, CheckpointManifest)> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: CheckpointManifest =
            serde_json::from_str(&text).map_err(|e| Error::Corrupt(format!("{}: {e}", path.display())))?;
        if manifest.format != CHECKPOINT_FORMAT {
            return Err(Error::Corrupt(format!("unknown checkpoint format {:?}", manifest.format)));
        }
        let layout = manifest.config.parameter_layout();
        if layout.len() != manifest.parameters.len() {
            return Err(Error::Corrupt(format!(
                "manifest lists {} parameters, architecture needs {}",
                manifest.parameters.len(),
                layout.len()
            )));
        }
        let mut params = Vec::with_capacity(layout.len());
        for ((name, shape), entry) in layout.iter().zip(&manifest.parameters) {
            if &entry.name != name || &entry.shape != shape {
                return Err(Error::Config(format!(
                    "manifest entry {}{:?} does not match expected {name}{shape:?}",
                    entry.name, entry.shape
                )));
            }
            let tensor: Tensor<F> = container::read(&dir.join(&entry.file))?;
            if tensor.shape() != shape.as_slice() {
                return Err(Error::Config(format!(
                    "parameter {name}: file holds shape {:?}, expected {shape:?}",
                    tensor.shape()
                )));
            }
            params.push(tensor);
        }
        let model = ConvClassifier::from_parts(manifest.config.clone(), params)?;
        Ok((model, manifest))
    }
}

pub fn argmax<F: Real>(values: &[F]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub const MANIFEST_FILE: &str = "manifest.json";
const CHECKPOINT_FORMAT: &str = "spatialkd-checkpoint/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub dtype: String,
    pub config: ConvNetConfig,
    pub parameters: Vec<ParamEntry>,
    /// Training provenance: seed, epochs, loss weights, mode.
    #[serde(default)]
    pub provenance: BTreeMap<String, serde_json::Value>,
}
