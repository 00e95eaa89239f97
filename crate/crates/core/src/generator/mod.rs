//! Conditional perturbation generator.
//!
//! The network maps an image batch and one projected target latent to a
//! perturbation bounded by `ε` in the ∞-norm:
//!
//! ```text
//! x ──encoder──► feat ─┐
//!                      ├─ CbF ─► x_c ─► TbF ─► f_t ─decoder─► o ─► ε·tanh(o) = δ
//! latent ─projector─► z_c ─────────────┘
//! ```
//!
//! The encoder reduces the spatial size by exactly 4 and the decoder restores
//! it, so `δ` always has the input's shape. Both fusion stages can be switched
//! off for ablations through [`FusionMode`].

pub mod attention;
pub mod fusion;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{ImageTensor, Perturbation};
use crate::latent::{LatentProjector, TargetClass, TargetLatent};
use crate::nn::{keyed_rng, Conv2d, ConvTranspose2d, InstanceNorm, ParamStore};

pub use attention::{ChannelAttention, CrossAttention, QkvProjection, SelfAttention};
pub use fusion::{fuse_cbf, CbfFusion, TbfFusion};

/// Default budget, `16/255`.
pub const DEFAULT_EPSILON: f64 = 16.0 / 255.0;

/// Which fusion stages are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionMode {
    /// CbF followed by TbF.
    #[default]
    Full,
    /// TbF only; a 1×1 convolution adapts the encoder output instead of CbF.
    NoCbf,
    /// CbF only; the decoder consumes the CbF output directly.
    NoTbf,
}

impl std::str::FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Self::Full),
            "no-cbf" => Ok(Self::NoCbf),
            "no-tbf" => Ok(Self::NoTbf),
            other => Err(Error::Config(format!(
                "unknown fusion mode {other:?} (expected full, no-cbf or no-tbf)"
            ))),
        }
    }
}

impl std::fmt::Display for FusionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Full => "full",
            Self::NoCbf => "no-cbf",
            Self::NoTbf => "no-tbf",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Feature width `C'` of the encoder output.
    pub base_channels: usize,
    /// Query/key width `d_k` of both attention stages.
    pub key_dim: usize,
    /// Channel-attention reduction ratio.
    pub reduction: usize,
    pub epsilon: f64,
    #[serde(default)]
    pub fusion: FusionMode,
}

impl GeneratorConfig {
    /// 224×224 RGB, `C' = 64`.
    pub fn full_scale() -> Self {
        Self {
            channels: 3,
            height: 224,
            width: 224,
            base_channels: 64,
            key_dim: 64,
            reduction: 4,
            epsilon: DEFAULT_EPSILON,
            fusion: FusionMode::Full,
        }
    }

    /// 32×32 RGB, `C' = 16`.
    pub fn toy() -> Self {
        Self {
            channels: 3,
            height: 32,
            width: 32,
            base_channels: 16,
            key_dim: 16,
            reduction: 4,
            epsilon: DEFAULT_EPSILON,
            fusion: FusionMode::Full,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.channels != 1 && self.channels != 3 {
            return bad(format!("channels must be 1 or 3, got {}", self.channels));
        }
        if self.height == 0 || self.width == 0 || !self.height.is_multiple_of(4) || !self.width.is_multiple_of(4) {
            return bad(format!(
                "input size {}×{} must be a positive multiple of 4",
                self.height, self.width
            ));
        }
        if self.base_channels < 8 || !self.base_channels.is_multiple_of(4) {
            return bad(format!(
                "base_channels must be a multiple of 4 and at least 8, got {}",
                self.base_channels
            ));
        }
        if self.reduction == 0 || !self.base_channels.is_multiple_of(self.reduction) {
            return bad(format!(
                "reduction {} must divide base_channels {}",
                self.reduction, self.base_channels
            ));
        }
        if self.key_dim == 0 {
            return bad("key_dim must be positive".into());
        }
        if !(self.epsilon > 0.0 && self.epsilon <= 1.0) {
            return bad(format!("epsilon must lie in (0, 1], got {}", self.epsilon));
        }
        Ok(())
    }

    pub fn feature_size(&self) -> (usize, usize) {
        (self.height / 4, self.width / 4)
    }
}

#[derive(Debug, Clone)]
struct ConvBlock {
    conv: Conv2d,
    norm: InstanceNorm,
}

impl ConvBlock {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.norm.forward(&self.conv.forward(x)?)?.relu()?)
    }
}

#[derive(Debug, Clone)]
struct UpBlock {
    conv: ConvTranspose2d,
    norm: InstanceNorm,
}

impl UpBlock {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.norm.forward(&self.conv.forward(x)?)?.relu()?)
    }
}

/// Three convolution stages (stride 1, 2, 2), each with instance norm and ReLU.
#[derive(Debug, Clone)]
pub struct Encoder {
    stages: [ConvBlock; 3],
}

/// Two 2× transposed-convolution stages and a final convolution to image channels.
#[derive(Debug, Clone)]
pub struct Decoder {
    up: [UpBlock; 2],
    head: Conv2d,
}

impl Encoder {
    fn new(store: &mut ParamStore, cfg: &GeneratorConfig, rng: &mut impl rand::Rng) -> Result<Self> {
        let c = cfg.base_channels;
        let widths = [(cfg.channels, c / 4, 1), (c / 4, c / 2, 2), (c / 2, c, 2)];
        let mut stages = Vec::with_capacity(3);
        for (i, (cin, cout, stride)) in widths.into_iter().enumerate() {
            let name = format!("encoder.{i}");
            stages.push(ConvBlock {
                conv: Conv2d::new(store, &format!("{name}.conv"), cin, cout, 3, stride, 1, rng)?,
                norm: InstanceNorm::new(store, &format!("{name}.norm"), cout)?,
            });
        }
        Ok(Self {
            stages: stages.try_into().expect("three stages"),
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for s in &self.stages {
            h = s.forward(&h)?;
        }
        Ok(h)
    }
}

impl Decoder {
    fn new(store: &mut ParamStore, cfg: &GeneratorConfig, rng: &mut impl rand::Rng) -> Result<Self> {
        let c = cfg.base_channels;
        let mut up = Vec::with_capacity(2);
        for (i, (cin, cout)) in [(c, c / 2), (c / 2, c / 4)].into_iter().enumerate() {
            let name = format!("decoder.{i}");
            up.push(UpBlock {
                conv: ConvTranspose2d::new(store, &format!("{name}.conv"), cin, cout, 4, 2, 1, rng)?,
                norm: InstanceNorm::new(store, &format!("{name}.norm"), cout)?,
            });
        }
        let head = Conv2d::new(store, "decoder.head", c / 4, cfg.channels, 3, 1, 1, rng)?;
        Ok(Self {
            up: up.try_into().expect("two stages"),
            head,
        })
    }

    pub fn forward(&self, f: &Tensor) -> Result<Tensor> {
        let mut h = f.clone();
        for u in &self.up {
            h = u.forward(&h)?;
        }
        self.head.forward(&h)
    }
}

/// `δ = ε · tanh(o)`, elementwise.
pub fn project_budget(raw: &Tensor, epsilon: f64) -> Result<Tensor> {
    if !(epsilon > 0.0 && epsilon <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "epsilon must lie in (0, 1], got {epsilon}"
        )));
    }
    Ok(raw.tanh()?.affine(epsilon, 0.0)?)
}

/// The full generator with its parameters.
#[derive(Debug, Clone)]
pub struct Generator {
    config: GeneratorConfig,
    store: ParamStore,
    projector: LatentProjector,
    encoder: Encoder,
    cbf: Option<CbfFusion>,
    adapter: Option<Conv2d>,
    tbf: Option<TbfFusion>,
    decoder: Decoder,
}

impl Generator {
    /// Builds a freshly initialized generator; weights depend only on `seed`.
    pub fn new(config: GeneratorConfig, dtype: DType, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new(dtype);
        let mut rng = keyed_rng("generator-init", &[seed]);
        let c = config.base_channels;
        let projector = LatentProjector::new(&mut store, "projector", &mut rng)?;
        let encoder = Encoder::new(&mut store, &config, &mut rng)?;
        let (cbf, adapter) = match config.fusion {
            FusionMode::NoCbf => (
                None,
                Some(Conv2d::new(&mut store, "adapter", c, c, 1, 1, 0, &mut rng)?),
            ),
            _ => (Some(CbfFusion::new(&mut store, "cbf", c, &mut rng)?), None),
        };
        let tbf = match config.fusion {
            FusionMode::NoTbf => None,
            _ => Some(TbfFusion::new(
                &mut store,
                "tbf",
                c,
                config.key_dim,
                config.reduction,
                &mut rng,
            )?),
        };
        let decoder = Decoder::new(&mut store, &config, &mut rng)?;
        Ok(Self {
            config,
            store,
            projector,
            encoder,
            cbf,
            adapter,
            tbf,
            decoder,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn projector(&self) -> &LatentProjector {
        &self.projector
    }

    pub fn cbf(&self) -> Option<&CbfFusion> {
        self.cbf.as_ref()
    }

    pub fn tbf(&self) -> Option<&TbfFusion> {
        self.tbf.as_ref()
    }

    /// Projects `(B, 4, 64, 64)` latents onto the feature grid.
    pub fn project_latent(&self, latents: &Tensor) -> Result<Tensor> {
        let (h, w) = self.config.feature_size();
        self.projector.project_tensor(latents, h, w)
    }

    pub fn encode(&self, images: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = images.dims4()?;
        if h % 4 != 0 || w % 4 != 0 {
            return Err(Error::InvalidArgument(format!(
                "image size {h}×{w} is not divisible by 4"
            )));
        }
        if c != self.config.channels {
            return Err(Error::shape("image channels", self.config.channels, c));
        }
        self.encoder.forward(images)
    }

    /// Stage feeding the transformer fusion: CbF, or the channel adapter when
    /// CbF is disabled.
    pub fn fuse_local(&self, x: &Tensor, z_c: &Tensor) -> Result<Tensor> {
        match (&self.cbf, &self.adapter) {
            (Some(cbf), _) => cbf.forward(x, z_c),
            (None, Some(adapter)) => adapter.forward(x),
            (None, None) => unreachable!("generator always has CbF or an adapter"),
        }
    }

    pub fn fuse_global(&self, x_c: &Tensor, z_c: &Tensor) -> Result<Tensor> {
        match &self.tbf {
            Some(tbf) => tbf.forward(x_c, z_c),
            None => Ok(x_c.clone()),
        }
    }

    pub fn decode(&self, f: &Tensor) -> Result<Tensor> {
        self.decoder.forward(f)
    }

    /// Unbounded decoder output `o` for a batch.
    pub fn raw_output(&self, images: &Tensor, latents: &Tensor) -> Result<Tensor> {
        let x = self.encode(images)?;
        let z_c = self.project_latent(latents)?;
        let x_c = self.fuse_local(&x, &z_c)?;
        let f_t = self.fuse_global(&x_c, &z_c)?;
        self.decode(&f_t)
    }

    /// Bounded perturbation batch `(B, C, H, W)` for images `(B, C, H, W)`
    /// and latents `(1 or B, 4, 64, 64)`.
    pub fn forward_batch(&self, images: &Tensor, latents: &Tensor) -> Result<Tensor> {
        project_budget(&self.raw_output(images, latents)?, self.config.epsilon)
    }

    /// Perturbation for one image and target class.
    pub fn forward(
        &self,
        x: &ImageTensor,
        target: &TargetClass,
        latent: &TargetLatent,
    ) -> Result<Perturbation> {
        if latent.class_id() != target.class_id {
            return Err(Error::LatentMismatch {
                latent: latent.class_id(),
                target: target.class_id,
            });
        }
        let dev = Device::Cpu;
        let images = x.to_tensor(&dev, self.dtype())?.unsqueeze(0)?;
        let z = latent.to_tensor(&dev, self.dtype())?;
        let delta = self.forward_batch(&images, &z)?.squeeze(0)?;
        Perturbation::from_tensor(&delta, self.config.epsilon as f32)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::latent::make_pseudo_latent;

    fn tiny(fusion: FusionMode) -> GeneratorConfig {
        GeneratorConfig {
            channels: 3,
            height: 8,
            width: 8,
            base_channels: 8,
            key_dim: 8,
            reduction: 4,
            epsilon: DEFAULT_EPSILON,
            fusion,
        }
    }

    #[test]
    fn encoder_reduces_by_four() {
        let g = Generator::new(GeneratorConfig::toy(), DType::F32, 0).unwrap();
        let x = Tensor::zeros((2, 3, 32, 32), DType::F32, &Device::Cpu).unwrap();
        assert_eq!(g.encode(&x).unwrap().dims(), &[2, 16, 8, 8]);
        let bad = Tensor::zeros((1, 3, 30, 30), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(g.encode(&bad), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn full_scale_shapes() {
        let g = Generator::new(GeneratorConfig::full_scale(), DType::F32, 0).unwrap();
        let x = Tensor::zeros((1, 3, 224, 224), DType::F32, &Device::Cpu).unwrap();
        let feat = g.encode(&x).unwrap();
        assert_eq!(feat.dims(), &[1, 64, 56, 56]);
        let o = g.decode(&feat).unwrap();
        assert_eq!(o.dims(), &[1, 3, 224, 224]);
    }

    #[test]
    fn decoder_with_zero_weights_outputs_zero() {
        let g = Generator::new(tiny(FusionMode::Full), DType::F64, 0).unwrap();
        for (name, var) in g.params().iter() {
            if name.starts_with("decoder.") {
                var.set(&var.as_tensor().zeros_like().unwrap()).unwrap();
            }
        }
        let f = Tensor::ones((1, 8, 2, 2), DType::F64, &Device::Cpu).unwrap();
        let o = g.decode(&f).unwrap();
        assert_eq!(o.dims(), &[1, 3, 8, 8]);
        assert_eq!(o.abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap(), 0.0);
    }

    #[test]
    fn budget_projection() {
        let eps = DEFAULT_EPSILON;
        let z = Tensor::zeros((1, 3, 4, 4), DType::F32, &Device::Cpu).unwrap();
        assert_eq!(
            project_budget(&z, eps).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap(),
            0.0
        );
        let big = (Tensor::ones((1, 3, 4, 4), DType::F32, &Device::Cpu).unwrap() * 1e6).unwrap();
        let d = project_budget(&big, eps).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        for v in d {
            assert!(v <= eps as f32);
            assert!((v as f64 - eps).abs() < 1e-7);
        }
        let o = Tensor::new(&[0.3f32, -2.0, 5.0], &Device::Cpu).unwrap();
        let pos = project_budget(&o, eps).unwrap().to_vec1::<f32>().unwrap();
        let neg = project_budget(&o.neg().unwrap(), eps).unwrap().to_vec1::<f32>().unwrap();
        for (a, b) in pos.iter().zip(&neg) {
            assert_eq!(*a, -*b);
        }
        assert!(project_budget(&o, 0.0).is_err());
        assert!(project_budget(&o, -0.1).is_err());
    }

    #[test]
    fn forward_preserves_shape_and_budget() {
        for fusion in [FusionMode::Full, FusionMode::NoCbf, FusionMode::NoTbf] {
            let g = Generator::new(tiny(fusion), DType::F32, 3).unwrap();
            let x = ImageTensor::filled(3, 8, 8, 0.5).unwrap();
            let t = TargetClass::new(1, "one");
            let d = g.forward(&x, &t, &make_pseudo_latent(&t, 0)).unwrap();
            assert_eq!(d.shape(), (3, 8, 8));
            assert!(d.linf() <= DEFAULT_EPSILON as f32);
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let g = Generator::new(GeneratorConfig::toy(), DType::F32, 1).unwrap();
        let x = ImageTensor::filled(3, 32, 32, 0.2).unwrap();
        let t = TargetClass::new(4, "four");
        let l = make_pseudo_latent(&t, 0);
        assert_eq!(g.forward(&x, &t, &l).unwrap(), g.forward(&x, &t, &l).unwrap());
        let same = Generator::new(GeneratorConfig::toy(), DType::F32, 1).unwrap();
        assert_eq!(g.forward(&x, &t, &l).unwrap(), same.forward(&x, &t, &l).unwrap());
    }

    #[test]
    fn forward_rejects_mismatched_latent() {
        let g = Generator::new(tiny(FusionMode::Full), DType::F32, 0).unwrap();
        let x = ImageTensor::filled(3, 8, 8, 0.5).unwrap();
        let r = g.forward(&x, &TargetClass::new(1, "a"), &make_pseudo_latent(&TargetClass::new(2, "b"), 0));
        assert!(matches!(r, Err(Error::LatentMismatch { .. })));
    }

    #[test]
    fn config_validation() {
        let mut c = GeneratorConfig::toy();
        c.height = 30;
        assert!(c.validate().is_err());
        let mut c = GeneratorConfig::toy();
        c.reduction = 3;
        assert!(c.validate().is_err());
        let mut c = GeneratorConfig::toy();
        c.base_channels = 4;
        assert!(c.validate().is_err());
        let mut c = GeneratorConfig::toy();
        c.epsilon = 0.0;
        assert!(c.validate().is_err());
        assert_eq!("no-tbf".parse::<FusionMode>().unwrap(), FusionMode::NoTbf);
        assert!("bogus".parse::<FusionMode>().is_err());
    }

    #[test]
    fn ablations_change_the_parameter_set() {
        let full = Generator::new(tiny(FusionMode::Full), DType::F32, 0).unwrap();
        let no_cbf = Generator::new(tiny(FusionMode::NoCbf), DType::F32, 0).unwrap();
        let no_tbf = Generator::new(tiny(FusionMode::NoTbf), DType::F32, 0).unwrap();
        assert!(full.params().get("cbf.conv.weight").is_some());
        assert!(no_cbf.params().get("cbf.conv.weight").is_none());
        assert!(no_cbf.params().get("adapter.weight").is_some());
        assert!(no_tbf.params().iter().all(|(n, _)| !n.starts_with("tbf.")));
    }
}
