//! Differentiable classifiers used as surrogates, victims and feature
//! extractors, plus the small in-repo CNNs used at desk scale.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor, D};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::archive::TensorArchive;
use crate::error::{Error, Result};
use crate::image::{stack_images, ImageTensor};
use crate::nn::{
    argmax_rows, bilinear_matrix, cross_entropy, keyed_rng, resample_2d, Adam, Conv2d, InstanceNorm, Linear,
    ParamStore,
};

/// Input size and normalization a model expects on top of `[0, 1]` pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Preprocessing {
    pub input_height: usize,
    pub input_width: usize,
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl Preprocessing {
    pub fn identity(channels: usize, height: usize, width: usize) -> Self {
        Self {
            input_height: height,
            input_width: width,
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    /// The usual ImageNet statistics.
    pub fn imagenet(height: usize, width: usize) -> Self {
        Self {
            input_height: height,
            input_width: width,
            mean: vec![0.485, 0.456, 0.406],
            std: vec![0.229, 0.224, 0.225],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mean.len() != self.std.len() || self.mean.is_empty() {
            return Err(Error::Config(format!(
                "preprocessing has {} means and {} stds",
                self.mean.len(),
                self.std.len()
            )));
        }
        if self.std.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(Error::Config("preprocessing std must be positive".into()));
        }
        if self.input_height == 0 || self.input_width == 0 {
            return Err(Error::Config("preprocessing input size must be positive".into()));
        }
        Ok(())
    }

    /// Bilinear resize to the input size (if needed), then per-channel
    /// standardization. Differentiable in `images`.
    pub fn apply(&self, images: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = images.dims4()?;
        if c != self.mean.len() {
            return Err(Error::shape("preprocessing channels", self.mean.len(), c));
        }
        let (oh, ow) = (self.input_height, self.input_width);
        let x = if (h, w) == (oh, ow) {
            images.clone()
        } else {
            resample_2d(images, &bilinear_matrix(h, oh)?, oh, &bilinear_matrix(w, ow)?, ow)?
        };
        let dev = images.device();
        let dtype = images.dtype();
        let mean = Tensor::from_slice(&self.mean, (1, c, 1, 1), dev)?.to_dtype(dtype)?;
        let inv_std: Vec<f32> = self.std.iter().map(|s| 1.0 / s).collect();
        let inv_std = Tensor::from_slice(&inv_std, (1, c, 1, 1), dev)?.to_dtype(dtype)?;
        Ok(x.broadcast_sub(&mean)?.broadcast_mul(&inv_std)?)
    }
}

/// A differentiable image classifier over `[0, 1]` pixel batches `(B, C, H, W)`.
///
/// Preprocessing is applied inside `logits`, `features` and `forward_to`, so
/// callers always pass raw pixels and gradients flow back to them.
pub trait Classifier {
    fn id(&self) -> &str;
    fn num_classes(&self) -> usize;
    fn preprocessing(&self) -> &Preprocessing;
    fn logits(&self, images: &Tensor) -> Result<Tensor>;

    /// Names of layers with spatial `(B, K, H', W')` outputs, input to output.
    fn spatial_layers(&self) -> Vec<String>;

    /// Activations of `layer` for a pixel batch.
    fn forward_to(&self, images: &Tensor, layer: &str) -> Result<Tensor>;

    /// Logits from the activations of `layer`.
    fn forward_from(&self, layer: &str, activations: &Tensor) -> Result<Tensor>;

    /// The last spatial layer, the default Grad-CAM layer.
    fn default_cam_layer(&self) -> Option<String> {
        self.spatial_layers().pop()
    }

    /// Predicted classes for a list of images, evaluated in chunks.
    fn predict(&self, images: &[ImageTensor], chunk: usize) -> Result<Vec<u32>> {
        let mut out = Vec::with_capacity(images.len());
        for part in images.chunks(chunk.max(1)) {
            let batch = stack_images(part, &Device::Cpu, DType::F32)?;
            out.extend(argmax_rows(&self.logits(&batch)?)?);
        }
        Ok(out)
    }
}

/// A model that maps images to penultimate feature vectors `(B, d)`.
pub trait FeatureExtractor {
    fn id(&self) -> &str;
    fn feature_dim(&self) -> usize;
    fn preprocessing(&self) -> &Preprocessing;

    /// Features of already-preprocessed inputs.
    fn features_raw(&self, inputs: &Tensor) -> Result<Tensor>;

    /// Features of `[0, 1]` pixel batches.
    fn features(&self, images: &Tensor) -> Result<Tensor> {
        self.features_raw(&self.preprocessing().apply(images)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CnnArch {
    /// Three 3×3 conv blocks (16, 32, 64) with max pooling.
    CnnA,
    /// 5×5 stem with average pooling, narrower blocks (12, 24, 48) and a
    /// hidden fully connected layer.
    CnnB,
}

impl std::str::FromStr for CnnArch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cnn-a" => Ok(Self::CnnA),
            "cnn-b" => Ok(Self::CnnB),
            other => Err(Error::Config(format!(
                "unknown architecture {other:?} (expected cnn-a or cnn-b)"
            ))),
        }
    }
}

impl std::fmt::Display for CnnArch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::CnnA => "cnn-a",
            Self::CnnB => "cnn-b",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Pool {
    Max,
    Avg,
    None,
}

#[derive(Debug, Clone)]
struct Block {
    conv: Conv2d,
    /// First block only: removes the per-image color offset.
    norm: Option<InstanceNorm>,
    pool: Pool,
}

impl Block {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut y = self.conv.forward(x)?;
        if let Some(n) = &self.norm {
            y = n.forward(&y)?;
        }
        let y = y.relu()?;
        Ok(match self.pool {
            Pool::Max => y.max_pool2d(2)?,
            Pool::Avg => y.avg_pool2d(2)?,
            Pool::None => y,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CnnSpec {
    pub arch: CnnArch,
    pub in_channels: usize,
    pub num_classes: usize,
    pub preprocessing: Preprocessing,
}

/// Small convolutional classifier with named blocks `block1..block3`.
#[derive(Debug, Clone)]
pub struct SmallCnn {
    id: String,
    spec: CnnSpec,
    store: ParamStore,
    blocks: Vec<Block>,
    hidden: Option<Linear>,
    head: Linear,
}

const BLOCK_NAMES: [&str; 3] = ["block1", "block2", "block3"];

impl SmallCnn {
    pub fn new(id: impl Into<String>, spec: CnnSpec, seed: u64) -> Result<Self> {
        spec.preprocessing.validate()?;
        if spec.preprocessing.mean.len() != spec.in_channels {
            return Err(Error::Config(format!(
                "preprocessing covers {} channels but the model takes {}",
                spec.preprocessing.mean.len(),
                spec.in_channels
            )));
        }
        if spec.num_classes < 2 {
            return Err(Error::Config("a classifier needs at least two classes".into()));
        }
        let mut rng = keyed_rng("classifier-init", &[seed]);
        let mut store = ParamStore::new(DType::F32);
        let c = spec.in_channels;
        // (kernel, padding, width, pool) per block
        let layout: [(usize, usize, usize, Pool); 3] = match spec.arch {
            CnnArch::CnnA => [(3, 1, 16, Pool::Max), (3, 1, 32, Pool::Max), (3, 1, 64, Pool::None)],
            CnnArch::CnnB => [(5, 2, 12, Pool::Avg), (3, 1, 24, Pool::Max), (3, 1, 48, Pool::Max)],
        };
        let mut blocks = Vec::with_capacity(3);
        let mut c_in = c;
        for (name, (k, p, width, pool)) in BLOCK_NAMES.iter().zip(layout) {
            let conv = Conv2d::he(&mut store, &format!("{name}.conv"), c_in, width, k, 1, p, &mut rng)?;
            let norm = match blocks.is_empty() {
                true => Some(InstanceNorm::new(&mut store, &format!("{name}.norm"), width)?),
                false => None,
            };
            blocks.push(Block { conv, norm, pool });
            c_in = width;
        }
        let hidden = match spec.arch {
            CnnArch::CnnA => None,
            CnnArch::CnnB => Some(Linear::he(&mut store, "hidden", c_in, c_in, &mut rng)?),
        };
        let head = Linear::new(&mut store, "head", c_in, spec.num_classes, &mut rng)?;
        Ok(Self {
            id: id.into(),
            spec,
            store,
            blocks,
            hidden,
            head,
        })
    }

    pub fn spec(&self) -> &CnnSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    /// Same weights behind different input preprocessing.
    pub fn with_preprocessing(mut self, pre: Preprocessing) -> Result<Self> {
        pre.validate()?;
        if pre.mean.len() != self.spec.in_channels {
            return Err(Error::Config(format!(
                "preprocessing covers {} channels but model {} takes {}",
                pre.mean.len(),
                self.id,
                self.spec.in_channels
            )));
        }
        self.spec.preprocessing = pre;
        Ok(self)
    }

    fn block_index(&self, layer: &str) -> Result<usize> {
        BLOCK_NAMES
            .iter()
            .position(|n| *n == layer)
            .ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "model {} has no spatial layer {layer:?} (have {})",
                    self.id,
                    BLOCK_NAMES.join(", ")
                ))
            })
    }

    fn head_input(&self, last: &Tensor) -> Result<Tensor> {
        let pooled = last.mean((2, 3))?;
        match &self.hidden {
            Some(h) => Ok(h.forward(&pooled)?.relu()?),
            None => Ok(pooled),
        }
    }

    fn forward_blocks(&self, mut x: Tensor, range: std::ops::Range<usize>) -> Result<Tensor> {
        for b in &self.blocks[range] {
            x = b.forward(&x)?;
        }
        Ok(x)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::json!({
            "id": self.id,
            "spec": self.spec,
        });
        TensorArchive::new("classifier", meta, self.store.to_arrays()?).save(path)
    }

    /// Loads weights written by [`SmallCnn::save`]; `id` overrides the stored
    /// identifier when given.
    pub fn load(path: &Path, id: Option<&str>) -> Result<Self> {
        let arc = TensorArchive::load(path)?;
        if arc.kind() != Some("classifier") {
            return Err(Error::format(path, "not a classifier archive"));
        }
        let spec: CnnSpec = serde_json::from_value(arc.meta["spec"].clone())
            .map_err(|e| Error::format(path, format!("bad classifier spec: {e}")))?;
        let stored = arc.meta["id"].as_str().unwrap_or("classifier").to_string();
        let model = Self::new(id.map(str::to_string).unwrap_or(stored), spec, 0)?;
        model.store.load_arrays(&arc.arrays)?;
        Ok(model)
    }
}

impl Classifier for SmallCnn {
    fn id(&self) -> &str {
        &self.id
    }

    fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    fn preprocessing(&self) -> &Preprocessing {
        &self.spec.preprocessing
    }

    fn logits(&self, images: &Tensor) -> Result<Tensor> {
        let x = self.spec.preprocessing.apply(images)?;
        let last = self.forward_blocks(x, 0..self.blocks.len())?;
        self.head.forward(&self.head_input(&last)?)
    }

    fn spatial_layers(&self) -> Vec<String> {
        BLOCK_NAMES.iter().map(|s| s.to_string()).collect()
    }

    fn forward_to(&self, images: &Tensor, layer: &str) -> Result<Tensor> {
        let i = self.block_index(layer)?;
        self.forward_blocks(self.spec.preprocessing.apply(images)?, 0..i + 1)
    }

    fn forward_from(&self, layer: &str, activations: &Tensor) -> Result<Tensor> {
        let i = self.block_index(layer)?;
        let last = self.forward_blocks(activations.clone(), i + 1..self.blocks.len())?;
        self.head.forward(&self.head_input(&last)?)
    }
}

impl FeatureExtractor for SmallCnn {
    fn id(&self) -> &str {
        &self.id
    }

    fn feature_dim(&self) -> usize {
        self.blocks.last().map(|b| b.conv.out_channels()).unwrap_or(0)
    }

    fn preprocessing(&self) -> &Preprocessing {
        &self.spec.preprocessing
    }

    fn features_raw(&self, inputs: &Tensor) -> Result<Tensor> {
        let last = self.forward_blocks(inputs.clone(), 0..self.blocks.len())?;
        self.head_input(&last)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierTraining {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for ClassifierTraining {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 16,
            learning_rate: 3e-3,
            seed: 0,
        }
    }
}

/// Supervised training with Adam and cross-entropy; returns the mean loss of
/// every epoch.
pub fn train_classifier(
    model: &SmallCnn,
    images: &[ImageTensor],
    labels: &[u32],
    cfg: &ClassifierTraining,
) -> Result<Vec<f64>> {
    if images.is_empty() {
        return Err(Error::EmptyInput("classifier training set".into()));
    }
    if images.len() != labels.len() {
        return Err(Error::shape("labels", images.len(), labels.len()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let mut opt = Adam::new(&model.store, cfg.learning_rate)?;
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..images.len()).collect();
        order.shuffle(&mut keyed_rng("classifier-shuffle", &[cfg.seed, epoch as u64]));
        let mut total = 0.0;
        for idx in order.chunks(cfg.batch_size) {
            let batch: Vec<ImageTensor> = idx.iter().map(|&i| images[i].clone()).collect();
            let targets: Vec<u32> = idx.iter().map(|&i| labels[i]).collect();
            let x = stack_images(&batch, &Device::Cpu, DType::F32)?;
            let loss = cross_entropy(&model.logits(&x)?, &targets)?;
            let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            if !value.is_finite() {
                return Err(Error::NonFinite(format!("classifier loss at epoch {epoch}")));
            }
            total += value * idx.len() as f64;
            opt.step(&model.store, &loss.backward()?)?;
        }
        history.push(total / images.len() as f64);
    }
    Ok(history)
}

/// Fraction of images whose prediction equals the label.
pub fn accuracy(model: &dyn Classifier, images: &[ImageTensor], labels: &[u32]) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::EmptyInput("accuracy evaluation set".into()));
    }
    let preds = model.predict(images, 64)?;
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / images.len() as f64)
}

/// Identifier → loaded model.
#[derive(Default)]
pub struct ModelRegistry {
    models: BTreeMap<String, SmallCnn>,
}

impl ModelRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, model: SmallCnn) {
        self.models.insert(model.id.clone(), model);
    }

    pub fn get(&self, id: &str) -> Result<&SmallCnn> {
        self.models.get(id).ok_or_else(|| {
            Error::Config(format!(
                "model {id:?} is not registered (known: {})",
                self.ids().join(", ")
            ))
        })
    }

    pub fn ids(&self) -> Vec<String> {
        self.models.keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }
}

/// Softmax probabilities of one image, mainly for diagnostics.
pub fn probabilities(model: &dyn Classifier, image: &ImageTensor) -> Result<Vec<f32>> {
    let x = image.to_tensor(&Device::Cpu, DType::F32)?.unsqueeze(0)?;
    let p = crate::nn::softmax_last_dim(&model.logits(&x)?)?;
    Ok(p.squeeze(0)?.to_vec1::<f32>()?)
}

/// Max over the class axis, detached; used to check logits are finite.
pub fn logits_finite(logits: &Tensor) -> Result<bool> {
    let m = logits.abs()?.max_keepdim(D::Minus1)?.max_all()?;
    Ok(m.to_dtype(DType::F64)?.to_scalar::<f64>()?.is_finite())
}
