//! End-to-end generator training against a frozen surrogate classifier.
//!
//! Every random choice in the loop is drawn from a keyed stream:
//! the epoch shuffle from `(seed, epoch)`, and the target class and masks of a
//! step from `(seed, step)`. A run resumed from an epoch-boundary checkpoint
//! therefore replays exactly the same batches as an uninterrupted one.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::archive::{sha256_hex, TensorArchive};
use crate::classifier::Classifier;
use crate::error::{Error, Result};
use crate::generator::{Generator, GeneratorConfig, DEFAULT_EPSILON};
use crate::image::{stack_images, ImageTensor, Perturbation};
use crate::latent::{LatentCache, TargetClass};
use crate::mask::{apply_keep_mask, keep_mask_tensor, mask_fires, sample_partition_with, MaskSpec};
use crate::nn::{cross_entropy, keyed_rng, Adam, AdamState, NamedArray};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epsilon: f64,
    pub grid_n: usize,
    pub mask_prob: f64,
    pub target_classes: Vec<TargetClass>,
    pub surrogate_id: String,
    pub seed: u64,
    /// Write a checkpoint every this many epochs (0: final checkpoint only).
    #[serde(default)]
    pub checkpoint_every: usize,
}

impl TrainConfig {
    /// 10 epochs, learning rate 2e-4, batch 16, `ε = 16/255`, a 3×3 grid and
    /// masking on every step.
    pub fn with_defaults(target_classes: Vec<TargetClass>, surrogate_id: impl Into<String>) -> Self {
        Self {
            epochs: 10,
            learning_rate: 2e-4,
            batch_size: 16,
            epsilon: DEFAULT_EPSILON,
            grid_n: 3,
            mask_prob: 1.0,
            target_classes,
            surrogate_id: surrogate_id.into(),
            seed: 0,
            checkpoint_every: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(self.epsilon > 0.0 && self.epsilon <= 1.0) {
            return bad(format!("epsilon must lie in (0, 1], got {}", self.epsilon));
        }
        if !(0.0..=1.0).contains(&self.mask_prob) {
            return bad(format!("mask_prob must lie in [0, 1], got {}", self.mask_prob));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.grid_n < 2 {
            return bad(format!("grid_n must be at least 2, got {}", self.grid_n));
        }
        if self.target_classes.is_empty() {
            return bad("at least one target class is required".into());
        }
        Ok(())
    }
}

/// `clamp(x + δ, 0, 1)`.
pub fn make_adversarial(x: &ImageTensor, delta: &Perturbation) -> Result<ImageTensor> {
    if x.shape() != delta.shape() {
        return Err(Error::shape("perturbation", x.shape(), delta.shape()));
    }
    let (c, h, w) = x.shape();
    let data = x.data().iter().zip(delta.data()).map(|(a, d)| a + d).collect();
    ImageTensor::from_clamped(c, h, w, data)
}

/// Batched, differentiable `clamp(x + δ, 0, 1)`.
pub fn make_adversarial_tensor(x: &Tensor, delta: &Tensor) -> Result<Tensor> {
    if x.dims() != delta.dims() {
        return Err(Error::shape("perturbation", x.dims(), delta.dims()));
    }
    Ok((x + delta)?.clamp(0.0, 1.0)?)
}

/// Random choices of one optimization step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepPlan {
    pub class_index: usize,
    pub masks: Vec<Option<MaskSpec>>,
}

/// Target class index and per-sample masks for step `step`.
pub fn plan_step(cfg: &TrainConfig, step: u64, batch: usize, h: usize, w: usize) -> Result<StepPlan> {
    let mut rng = keyed_rng("train-step", &[cfg.seed, step]);
    let class_index = sample_class_index(&mut rng, cfg.target_classes.len());
    let mut masks = Vec::with_capacity(batch);
    for _ in 0..batch {
        let spec = sample_partition_with(cfg.grid_n, h, w, &mut rng)?;
        masks.push(mask_fires(&mut rng, cfg.mask_prob).then_some(spec));
    }
    Ok(StepPlan { class_index, masks })
}

/// Uniform draw of a target-class index.
pub fn sample_class_index(rng: &mut impl Rng, n_classes: usize) -> usize {
    rng.random_range(0..n_classes)
}

/// One forward/backward pass and optimizer update; returns the batch loss.
///
/// `latent` is the `(1, 4, 64, 64)` latent of `target`. A non-finite loss
/// leaves the parameters untouched and reports the step.
pub fn training_step(
    generator: &Generator,
    opt: &mut Adam,
    surrogate: &dyn Classifier,
    images: &Tensor,
    target: &TargetClass,
    latent: &Tensor,
    masks: &[Option<MaskSpec>],
) -> Result<f64> {
    let (b, _, h, w) = images.dims4()?;
    if b == 0 {
        return Err(Error::EmptyInput("training batch".into()));
    }
    if masks.len() != b {
        return Err(Error::shape("mask list", b, masks.len()));
    }
    let delta = generator.forward_batch(images, latent)?;
    let keep = keep_mask_tensor(masks, h, w, &Device::Cpu)?;
    let delta = apply_keep_mask(&delta, &keep)?;
    let adv = make_adversarial_tensor(images, &delta)?;
    let logits = surrogate.logits(&adv.to_dtype(DType::F32)?)?;
    let loss = cross_entropy(&logits, &vec![target.class_id; b])?;
    let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if !value.is_finite() {
        return Err(Error::NonFinite(format!(
            "training loss at optimizer step {} (target class {})",
            opt.step_count() + 1,
            target.class_id
        )));
    }
    opt.step(generator.params(), &loss.backward()?)?;
    Ok(value)
}

/// Progress counters saved with every checkpoint.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub epochs_done: usize,
    pub step: u64,
    /// Loss of every optimizer step so far.
    pub losses: Vec<f64>,
}

/// Generator weights plus everything needed to resume or reproduce training.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub generator: GeneratorConfig,
    pub train: TrainConfig,
    pub state: TrainState,
    pub params: Vec<NamedArray>,
    pub optimizer: Option<AdamState>,
}

impl Checkpoint {
    fn to_archive(&self) -> TensorArchive {
        let meta = serde_json::json!({
            "generator": self.generator,
            "train": self.train,
            "state": self.state,
            "optimizer_step": self.optimizer.as_ref().map(|o| o.step),
        });
        let mut arrays = Vec::new();
        let prefixed = |prefix: &str, list: &[NamedArray]| {
            list.iter()
                .map(|a| NamedArray {
                    name: format!("{prefix}{}", a.name),
                    shape: a.shape.clone(),
                    data: a.data.clone(),
                })
                .collect::<Vec<_>>()
        };
        arrays.extend(prefixed("param/", &self.params));
        if let Some(o) = &self.optimizer {
            arrays.extend(prefixed("adam.m/", &o.first));
            arrays.extend(prefixed("adam.v/", &o.second));
        }
        TensorArchive::new("checkpoint", meta, arrays)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.to_archive().to_bytes()
    }

    /// SHA-256 of the serialized checkpoint.
    pub fn hash(&self) -> Result<String> {
        Ok(sha256_hex(&self.to_bytes()?))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_archive().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let arc = TensorArchive::load(path)?;
        if arc.kind() != Some("checkpoint") {
            return Err(Error::format(path, "not a generator checkpoint"));
        }
        let field = |key: &str| {
            arc.meta
                .get(key)
                .cloned()
                .ok_or_else(|| Error::format(path, format!("checkpoint metadata lacks {key}")))
        };
        let parse_err = |e: serde_json::Error| Error::format(path, format!("bad checkpoint metadata: {e}"));
        let generator: GeneratorConfig = serde_json::from_value(field("generator")?).map_err(parse_err)?;
        let train: TrainConfig = serde_json::from_value(field("train")?).map_err(parse_err)?;
        let state: TrainState = serde_json::from_value(field("state")?).map_err(parse_err)?;
        let optimizer = arc.meta.get("optimizer_step").and_then(|v| v.as_u64()).map(|step| AdamState {
            step,
            first: arc.arrays_with_prefix("adam.m/"),
            second: arc.arrays_with_prefix("adam.v/"),
        });
        Ok(Self {
            generator,
            train,
            state,
            params: arc.arrays_with_prefix("param/"),
            optimizer,
        })
    }

    /// Rebuilds the generator with the stored weights.
    pub fn generator(&self) -> Result<Generator> {
        let g = Generator::new(self.generator.clone(), DType::F32, 0)?;
        g.params().load_arrays(&self.params)?;
        Ok(g)
    }
}

/// Training loop state: generator, optimizer and counters.
pub struct Trainer<'a> {
    cfg: TrainConfig,
    generator: Generator,
    opt: Adam,
    surrogate: &'a dyn Classifier,
    latents: BTreeMap<u32, Tensor>,
    state: TrainState,
}

impl<'a> Trainer<'a> {
    /// Fresh generator initialized from `cfg.seed`. The generator budget is
    /// taken from `cfg.epsilon`.
    pub fn new(
        cfg: TrainConfig,
        mut gen_cfg: GeneratorConfig,
        surrogate: &'a dyn Classifier,
        cache: &LatentCache,
    ) -> Result<Self> {
        cfg.validate()?;
        if surrogate.id() != cfg.surrogate_id {
            return Err(Error::Config(format!(
                "surrogate {:?} does not match configured surrogate_id {:?}",
                surrogate.id(),
                cfg.surrogate_id
            )));
        }
        gen_cfg.epsilon = cfg.epsilon;
        let generator = Generator::new(gen_cfg, DType::F32, cfg.seed)?;
        let opt = Adam::new(generator.params(), cfg.learning_rate)?;
        let latents = load_latents(&cfg, cache)?;
        Ok(Self {
            cfg,
            generator,
            opt,
            surrogate,
            latents,
            state: TrainState::default(),
        })
    }

    /// Continues from a checkpoint; `cfg.epochs` may extend the stored run.
    pub fn resume(ckpt: &Checkpoint, epochs: usize, surrogate: &'a dyn Classifier, cache: &LatentCache) -> Result<Self> {
        let mut cfg = ckpt.train.clone();
        cfg.epochs = epochs;
        let mut t = Self::new(cfg, ckpt.generator.clone(), surrogate, cache)?;
        t.generator.params().load_arrays(&ckpt.params)?;
        if let Some(o) = &ckpt.optimizer {
            t.opt.load_state(o)?;
        }
        t.state = ckpt.state.clone();
        Ok(t)
    }

    pub fn generator(&self) -> &Generator {
        &self.generator
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        Ok(Checkpoint {
            generator: self.generator.config().clone(),
            train: self.cfg.clone(),
            state: self.state.clone(),
            params: self.generator.params().to_arrays()?,
            optimizer: Some(self.opt.state()?),
        })
    }

    /// Runs one epoch over `images`.
    pub fn run_epoch(&mut self, images: &[ImageTensor]) -> Result<()> {
        if images.is_empty() {
            return Err(Error::EmptyInput("training set".into()));
        }
        let epoch = self.state.epochs_done as u64;
        let mut order: Vec<usize> = (0..images.len()).collect();
        order.shuffle(&mut keyed_rng("train-shuffle", &[self.cfg.seed, epoch]));
        for idx in order.chunks(self.cfg.batch_size) {
            let batch: Vec<ImageTensor> = idx.iter().map(|&i| images[i].clone()).collect();
            let x = stack_images(&batch, &Device::Cpu, self.generator.dtype())?;
            let (_, _, h, w) = x.dims4()?;
            let plan = plan_step(&self.cfg, self.state.step, idx.len(), h, w)?;
            let target = &self.cfg.target_classes[plan.class_index];
            let latent = &self.latents[&target.class_id];
            let loss = training_step(
                &self.generator,
                &mut self.opt,
                self.surrogate,
                &x,
                target,
                latent,
                &plan.masks,
            )?;
            self.state.losses.push(loss);
            self.state.step += 1;
        }
        self.state.epochs_done += 1;
        Ok(())
    }

    /// Trains until `cfg.epochs` epochs are done, writing checkpoints into
    /// `out_dir` when given. Returns the final checkpoint.
    pub fn run(&mut self, images: &[ImageTensor], out_dir: Option<&Path>) -> Result<Checkpoint> {
        if images.is_empty() {
            return Err(Error::EmptyInput("training set".into()));
        }
        if let Some(dir) = out_dir {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        while self.state.epochs_done < self.cfg.epochs {
            self.run_epoch(images)?;
            let done = self.state.epochs_done;
            log::info!(
                "epoch {done}/{}: mean loss {:.4}",
                self.cfg.epochs,
                epoch_mean(&self.state.losses, images.len(), self.cfg.batch_size)
            );
            if let (Some(dir), true) = (out_dir, self.cfg.checkpoint_every > 0 && done.is_multiple_of(self.cfg.checkpoint_every)) {
                self.checkpoint()?.save(&periodic_path(dir, done))?;
            }
        }
        let ckpt = self.checkpoint()?;
        if let Some(dir) = out_dir {
            ckpt.save(&final_path(dir))?;
        }
        Ok(ckpt)
    }
}

fn epoch_mean(losses: &[f64], n: usize, batch: usize) -> f64 {
    let per_epoch = n.div_ceil(batch).max(1);
    let tail = &losses[losses.len().saturating_sub(per_epoch)..];
    tail.iter().sum::<f64>() / tail.len().max(1) as f64
}

fn load_latents(cfg: &TrainConfig, cache: &LatentCache) -> Result<BTreeMap<u32, Tensor>> {
    let mut out = BTreeMap::new();
    for t in &cfg.target_classes {
        let lat = cache.get(t.class_id)?;
        out.insert(t.class_id, lat.to_tensor(&Device::Cpu, DType::F32)?);
    }
    Ok(out)
}

pub fn final_path(dir: &Path) -> PathBuf {
    dir.join("generator.ckpt")
}

pub fn periodic_path(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("generator_epoch{epoch:03}.ckpt"))
}

/// Trains a fresh generator; see [`Trainer`].
pub fn train(
    cfg: TrainConfig,
    gen_cfg: GeneratorConfig,
    images: &[ImageTensor],
    cache: &LatentCache,
    surrogate: &dyn Classifier,
    out_dir: Option<&Path>,
) -> Result<Checkpoint> {
    if images.is_empty() {
        return Err(Error::EmptyInput("training set".into()));
    }
    Trainer::new(cfg, gen_cfg, surrogate, cache)?.run(images, out_dir)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::Preprocessing;
    use crate::generator::FusionMode;
    use crate::latent::make_pseudo_latent;

    /// Ignores its input and returns fixed logits, still connected to the
    /// input so gradients flow.
    struct Flat {
        pre: Preprocessing,
        classes: usize,
    }

    impl Classifier for Flat {
        fn id(&self) -> &str {
            "flat"
        }
        fn num_classes(&self) -> usize {
            self.classes
        }
        fn preprocessing(&self) -> &Preprocessing {
            &self.pre
        }
        fn logits(&self, images: &Tensor) -> Result<Tensor> {
            let b = images.dims()[0];
            let s = (images.sum((1, 2, 3))? * 0.0)?.unsqueeze(1)?;
            Ok(s.broadcast_as((b, self.classes))?.contiguous()?)
        }
        fn spatial_layers(&self) -> Vec<String> {
            vec![]
        }
        fn forward_to(&self, _: &Tensor, layer: &str) -> Result<Tensor> {
            Err(Error::InvalidArgument(layer.into()))
        }
        fn forward_from(&self, layer: &str, _: &Tensor) -> Result<Tensor> {
            Err(Error::InvalidArgument(layer.into()))
        }
    }

    fn tiny() -> GeneratorConfig {
        GeneratorConfig {
            channels: 3,
            height: 8,
            width: 8,
            base_channels: 8,
            key_dim: 8,
            reduction: 4,
            epsilon: DEFAULT_EPSILON,
            fusion: FusionMode::Full,
        }
    }

    fn setup(classes: usize) -> (TrainConfig, LatentCache, Vec<ImageTensor>) {
        let targets: Vec<TargetClass> = (0..classes as u32).map(|i| TargetClass::new(i, format!("c{i}"))).collect();
        let mut cache = LatentCache::new();
        for t in &targets {
            cache.insert(make_pseudo_latent(t, 0));
        }
        let mut cfg = TrainConfig::with_defaults(targets, "flat");
        cfg.batch_size = 4;
        let mut rng = keyed_rng("train-test", &[0]);
        let images = (0..6)
            .map(|_| {
                let d = (0..3 * 64).map(|_| rng.random::<f32>()).collect();
                ImageTensor::new(3, 8, 8, d).unwrap()
            })
            .collect();
        (cfg, cache, images)
    }

    #[test]
    fn adversarial_is_clamped() {
        let x = ImageTensor::filled(3, 4, 4, 1.0).unwrap();
        let d = Perturbation::new(3, 4, 4, vec![0.0625; 48], 0.0625).unwrap();
        assert_eq!(make_adversarial(&x, &d).unwrap(), x);
        let z = Perturbation::zeros(3, 4, 4, 0.0625).unwrap();
        assert_eq!(make_adversarial(&x, &z).unwrap(), x);
        let bad = Perturbation::zeros(3, 4, 5, 0.0625).unwrap();
        assert!(make_adversarial(&x, &bad).is_err());
    }

    #[test]
    fn uniform_logits_give_log_l() {
        let (cfg, cache, images) = setup(8);
        let flat = Flat {
            pre: Preprocessing::identity(3, 8, 8),
            classes: 8,
        };
        let t = Trainer::new(cfg.clone(), tiny(), &flat, &cache).unwrap();
        let mut opt = Adam::new(t.generator().params(), 1e-3).unwrap();
        let x = stack_images(&images, &Device::Cpu, DType::F32).unwrap();
        let z = cache.get(3).unwrap().to_tensor(&Device::Cpu, DType::F32).unwrap();
        let loss = training_step(t.generator(), &mut opt, &flat, &x, &cfg.target_classes[3], &z, &vec![None; 6]).unwrap();
        assert!((loss - (8f64).ln()).abs() < 1e-6, "{loss}");
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let (mut cfg, cache, images) = setup(2);
        cfg.epochs = 0;
        let flat = Flat {
            pre: Preprocessing::identity(3, 8, 8),
            classes: 2,
        };
        let init = Generator::new(
            GeneratorConfig {
                epsilon: cfg.epsilon,
                ..tiny()
            },
            DType::F32,
            cfg.seed,
        )
        .unwrap();
        let ck = train(cfg, tiny(), &images, &cache, &flat, None).unwrap();
        assert_eq!(ck.params, init.params().to_arrays().unwrap());
        assert!(ck.state.losses.is_empty());
    }

    #[test]
    fn missing_latent_and_empty_data() {
        let (cfg, _, images) = setup(2);
        let flat = Flat {
            pre: Preprocessing::identity(3, 8, 8),
            classes: 2,
        };
        let empty = LatentCache::new();
        assert!(matches!(
            train(cfg.clone(), tiny(), &images, &empty, &flat, None),
            Err(Error::MissingLatent(0))
        ));
        let (_, cache, _) = setup(2);
        assert!(matches!(
            train(cfg, tiny(), &[], &cache, &flat, None),
            Err(Error::EmptyInput(_))
        ));
    }

    #[test]
    fn class_sampling_is_uniform() {
        let (cfg, _, _) = setup(8);
        let mut counts = [0usize; 8];
        let n = 10_000u64;
        for step in 0..n {
            counts[plan_step(&cfg, step, 1, 8, 8).unwrap().class_index] += 1;
        }
        for c in counts {
            let f = c as f64 / n as f64;
            assert!((f - 0.125).abs() < 0.05 * 0.125, "{f}");
        }
    }

    #[test]
    fn config_validation() {
        let (cfg, _, _) = setup(2);
        let mut c = cfg.clone();
        c.learning_rate = 0.0;
        assert!(c.validate().is_err());
        let mut c = cfg.clone();
        c.epsilon = 1.5;
        assert!(c.validate().is_err());
        let mut c = cfg;
        c.mask_prob = -0.1;
        assert!(c.validate().is_err());
    }
}
