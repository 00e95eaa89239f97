//! Diagnostic metrics: feature quality (cosine similarity of perturbation
//! features to a class prototype), feature quantity (Grad-CAM area above a
//! threshold) and the PSNR/SSIM image-quality pair.

use candle_core::{DType, Device, IndexOp, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::classifier::{Classifier, FeatureExtractor};
use crate::error::{Error, Result};
use crate::image::{stack_images, ImageTensor, Perturbation};
use crate::nn::{bilinear_matrix, resample_2d};

/// Min-max scales `delta` to `[0, 1]` over all entries, then standardizes
/// each channel with `mean`/`std`. Returns a `(1, C, H, W)` tensor.
pub fn normalize_perturbation(delta: &Perturbation, mean: &[f32], std: &[f32]) -> Result<Tensor> {
    let (c, h, w) = delta.shape();
    if mean.len() != c || std.len() != c {
        return Err(Error::shape("normalization constants", c, (mean.len(), std.len())));
    }
    let d = delta.data();
    let lo = d.iter().copied().fold(f32::INFINITY, f32::min) as f64;
    let hi = d.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    if !(hi > lo) {
        return Err(Error::Degenerate("constant perturbation has no range to normalize".into()));
    }
    let plane = h * w;
    let out: Vec<f32> = d
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let ch = i / plane;
            let scaled = (v as f64 - lo) / (hi - lo);
            ((scaled - mean[ch] as f64) / std[ch] as f64) as f32
        })
        .collect();
    Ok(Tensor::from_vec(out, (1, c, h, w), &Device::Cpu)?)
}

/// Cosine similarity of two vectors, computed in `f64`.
pub fn cosine_similarity(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("feature vectors", a.len(), b.len()));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum();
    let na: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Degenerate("cosine similarity of a zero-norm feature vector".into()));
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Mean penultimate feature of real images of one class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassPrototype {
    pub class_id: u32,
    pub mean_feature: Vec<f32>,
    pub n_source_images: usize,
}

impl ClassPrototype {
    /// A zero prototype makes every cosine similarity undefined.
    pub fn is_degenerate(&self) -> bool {
        self.mean_feature.iter().all(|v| *v == 0.0)
    }
}

fn feature_rows(t: &Tensor) -> Result<Vec<Vec<f32>>> {
    Ok(t.to_dtype(DType::F32)?.to_vec2::<f32>()?)
}

/// Arithmetic mean of the extractor features of `images`.
pub fn build_prototype(
    images: &[ImageTensor],
    class_id: u32,
    extractor: &dyn FeatureExtractor,
) -> Result<ClassPrototype> {
    if images.is_empty() {
        return Err(Error::EmptyInput(format!("no images to build the class {class_id} prototype")));
    }
    let mut sum: Vec<f64> = Vec::new();
    for part in images.chunks(64) {
        let x = stack_images(part, &Device::Cpu, DType::F32)?;
        for row in feature_rows(&extractor.features(&x)?)? {
            if sum.is_empty() {
                sum = vec![0.0; row.len()];
            }
            for (s, v) in sum.iter_mut().zip(row) {
                *s += v as f64;
            }
        }
    }
    let n = images.len() as f64;
    let mean_feature: Vec<f32> = sum.iter().map(|s| (s / n) as f32).collect();
    if mean_feature.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("class {class_id} prototype")));
    }
    let proto = ClassPrototype {
        class_id,
        mean_feature,
        n_source_images: images.len(),
    };
    if proto.is_degenerate() {
        log::warn!("class {class_id} prototype is the zero vector; feature quality is undefined");
    }
    Ok(proto)
}

/// Cosine similarity between the features of the normalized perturbation and
/// the class prototype.
pub fn feature_quality(
    delta: &Perturbation,
    proto: &ClassPrototype,
    extractor: &dyn FeatureExtractor,
) -> Result<f64> {
    let pre = extractor.preprocessing();
    let mut x = normalize_perturbation(delta, &pre.mean, &pre.std)?;
    let (_, _, h, w) = x.dims4()?;
    let (oh, ow) = (pre.input_height, pre.input_width);
    if (h, w) != (oh, ow) {
        x = resample_2d(&x, &bilinear_matrix(h, oh)?, oh, &bilinear_matrix(w, ow)?, ow)?;
    }
    let f = feature_rows(&extractor.features_raw(&x)?)?;
    cosine_similarity(&f[0], &proto.mean_feature)
}

/// A `[0, 1]` activation map; min 0 and max 1 unless constant (then all 0).
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl ActivationMap {
    /// Min-max normalization of a raw map; constant maps become all-zero.
    pub fn normalized(height: usize, width: usize, raw: &[f64]) -> Result<Self> {
        if raw.len() != height * width {
            return Err(Error::shape("activation map", height * width, raw.len()));
        }
        let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let data = if hi > lo {
            raw.iter().map(|v| ((v - lo) / (hi - lo)) as f32).collect()
        } else {
            vec![0.0; raw.len()]
        };
        Ok(Self { height, width, data })
    }
}

/// Grad-CAM of `class_id` at `layer`, upsampled to the input resolution.
///
/// Bilinear upsampling is affine-equivariant, so normalizing once after the
/// upsampling gives the same map as normalizing before and after.
pub fn grad_cam(model: &dyn Classifier, x: &ImageTensor, class_id: u32, layer: &str) -> Result<ActivationMap> {
    if class_id as usize >= model.num_classes() {
        return Err(Error::InvalidArgument(format!(
            "class {class_id} outside the {} classes of {}",
            model.num_classes(),
            model.id()
        )));
    }
    let input = x.to_tensor(&Device::Cpu, DType::F32)?.unsqueeze(0)?;
    let act = model.forward_to(&input, layer)?;
    if act.rank() != 4 {
        return Err(Error::InvalidArgument(format!(
            "layer {layer:?} of {} is not spatial (rank {})",
            model.id(),
            act.rank()
        )));
    }
    let act = Var::from_tensor(&act.detach())?;
    let logits = model.forward_from(layer, act.as_tensor())?;
    let score = logits.i((0, class_id as usize))?;
    let grads = score.backward()?;
    let (_, k, hh, ww) = act.as_tensor().dims4()?;
    let g = match grads.get(act.as_tensor()) {
        Some(g) => g.clone(),
        None => act.as_tensor().zeros_like()?,
    };
    let weights = g.mean((2, 3))?.reshape((1, k, 1, 1))?;
    let cam = act.as_tensor().broadcast_mul(&weights)?.sum_keepdim(1)?.relu()?;
    let cam = cam.to_dtype(DType::F64)?;
    let (_, _, h, w) = input.dims4()?;
    let up = resample_2d(&cam, &bilinear_matrix(hh, h)?, h, &bilinear_matrix(ww, w)?, w)?;
    let raw = up.flatten_all()?.to_vec1::<f64>()?;
    ActivationMap::normalized(h, w, &raw)
}

/// Fraction of pixels with activation strictly above `tau`.
pub fn attention_area_ratio(map: &ActivationMap, tau: f64) -> f64 {
    if map.data.is_empty() {
        return 0.0;
    }
    map.data.iter().filter(|&&v| v as f64 > tau).count() as f64 / map.data.len() as f64
}

/// PSNR with unit peak over raw values; `+∞` when the inputs are identical.
pub fn psnr_values(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("psnr inputs", a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(Error::EmptyInput("psnr inputs".into()));
    }
    let mse = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

pub fn psnr(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape("psnr inputs", a.shape(), b.shape()));
    }
    let to64 = |x: &ImageTensor| x.data().iter().map(|v| *v as f64).collect::<Vec<_>>();
    psnr_values(&to64(a), &to64(b))
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn ssim_taps() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let t: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-(i as f64 - r).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = t.iter().sum();
    t.into_iter().map(|v| v / s).collect()
}

/// Single-scale SSIM with an 11×11 Gaussian window (σ = 1.5) over every
/// valid window position, averaged over positions and channels.
pub fn ssim(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape("ssim inputs", a.shape(), b.shape()));
    }
    let (c, h, w) = a.shape();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::InvalidArgument(format!(
            "ssim needs images of at least {SSIM_WINDOW}×{SSIM_WINDOW}, got {h}×{w}"
        )));
    }
    let taps = ssim_taps();
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut total = 0.0;
    for ch in 0..c {
        let (pa, pb) = (a.plane(ch), b.plane(ch));
        let mut acc = 0.0;
        for y in 0..oh {
            for x in 0..ow {
                let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for dy in 0..SSIM_WINDOW {
                    for dx in 0..SSIM_WINDOW {
                        let wt = taps[dy] * taps[dx];
                        let k = (y + dy) * w + x + dx;
                        let (va, vb) = (pa[k] as f64, pb[k] as f64);
                        ma += wt * va;
                        mb += wt * vb;
                        saa += wt * va * va;
                        sbb += wt * vb * vb;
                        sab += wt * va * vb;
                    }
                }
                let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
                acc += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                    / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
            }
        }
        total += acc / (oh * ow) as f64;
    }
    Ok(total / c as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::Preprocessing;
    use crate::nn::keyed_rng;
    use rand::Rng;

    /// Extractor stub returning a fixed vector for every input.
    struct Fixed {
        v: Vec<f32>,
        pre: Preprocessing,
    }

    impl FeatureExtractor for Fixed {
        fn id(&self) -> &str {
            "fixed"
        }
        fn feature_dim(&self) -> usize {
            self.v.len()
        }
        fn preprocessing(&self) -> &Preprocessing {
            &self.pre
        }
        fn features_raw(&self, inputs: &Tensor) -> Result<Tensor> {
            let b = inputs.dims()[0];
            let rows: Vec<f32> = (0..b).flat_map(|_| self.v.clone()).collect();
            Ok(Tensor::from_vec(rows, (b, self.v.len()), &Device::Cpu)?)
        }
    }

    fn fixed(v: Vec<f32>) -> Fixed {
        Fixed {
            v,
            pre: Preprocessing::imagenet(4, 4),
        }
    }

    fn delta() -> Perturbation {
        let d = (0..48).map(|i| ((i as f32) / 47.0 - 0.5) * 0.1).collect();
        Perturbation::new(3, 4, 4, d, 0.1).unwrap()
    }

    #[test]
    fn normalization_hand_case() {
        // min −0.1 → 0, max 0.1 → 1, 0 → 0.5, 0.05 → 0.75; then (v − 0.5)/0.25
        let d = Perturbation::new(1, 2, 2, vec![-0.1, 0.1, 0.0, 0.05], 0.1).unwrap();
        let t = normalize_perturbation(&d, &[0.5], &[0.25]).unwrap();
        let v = t.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let expect = [-2.0, 2.0, 0.0, 1.0];
        for (a, b) in v.iter().zip(expect) {
            assert!((a - b).abs() < 1e-6, "{v:?}");
        }
        let flat = Perturbation::new(1, 2, 2, vec![0.02; 4], 0.1).unwrap();
        assert!(matches!(
            normalize_perturbation(&flat, &[0.5], &[0.25]),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn feature_quality_stub_cases() {
        let p = vec![1.0, -2.0, 0.5];
        let proto = ClassPrototype {
            class_id: 0,
            mean_feature: p.clone(),
            n_source_images: 1,
        };
        let same = feature_quality(&delta(), &proto, &fixed(p.clone())).unwrap();
        assert!((same - 1.0).abs() < 1e-6);
        let neg = feature_quality(&delta(), &proto, &fixed(p.iter().map(|v| -v).collect())).unwrap();
        assert!((neg + 1.0).abs() < 1e-6);
        let orth = feature_quality(&delta(), &proto, &fixed(vec![2.0, 1.0, 0.0])).unwrap();
        assert!(orth.abs() < 1e-6);
    }

    #[test]
    fn prototype_cases() {
        let img = ImageTensor::filled(3, 4, 4, 0.5).unwrap();
        let p = build_prototype(std::slice::from_ref(&img), 3, &fixed(vec![1.0, 2.0])).unwrap();
        assert_eq!(p.mean_feature, vec![1.0, 2.0]);
        assert_eq!(p.n_source_images, 1);
        assert!(!p.is_degenerate());
        assert!(build_prototype(&[], 3, &fixed(vec![1.0])).is_err());
    }

    #[test]
    fn area_ratio_cases() {
        let map = ActivationMap {
            height: 2,
            width: 2,
            data: vec![1.0, 1.0, 0.0, 0.0],
        };
        assert_eq!(attention_area_ratio(&map, 0.5), 0.5);
        assert_eq!(attention_area_ratio(&map, 1.0), 0.0);
        let mut rng = keyed_rng("ratio", &[0]);
        let m = ActivationMap {
            height: 8,
            width: 8,
            data: (0..64).map(|_| rng.random::<f32>()).collect(),
        };
        let mut last = 1.0;
        for i in 0..=100 {
            let r = attention_area_ratio(&m, i as f64 / 100.0);
            assert!(r <= last);
            last = r;
        }
    }

    #[test]
    fn normalized_map_extremes() {
        let m = ActivationMap::normalized(1, 3, &[2.0, 5.0, 3.0]).unwrap();
        assert_eq!(m.data[0], 0.0);
        assert_eq!(m.data[1], 1.0);
        let c = ActivationMap::normalized(1, 3, &[4.0; 3]).unwrap();
        assert!(c.data.iter().all(|v| *v == 0.0));
    }

    fn cnn() -> crate::classifier::SmallCnn {
        use crate::classifier::{CnnArch, CnnSpec, SmallCnn};
        let spec = CnnSpec {
            arch: CnnArch::CnnA,
            in_channels: 3,
            num_classes: 4,
            preprocessing: Preprocessing::identity(3, 16, 16),
        };
        SmallCnn::new("cam", spec, 5).unwrap()
    }

    #[test]
    fn grad_cam_range_and_extremes() {
        let m = cnn();
        let mut rng = keyed_rng("cam", &[1]);
        let x = ImageTensor::new(3, 16, 16, (0..768).map(|_| rng.random::<f32>()).collect()).unwrap();
        let mut saw_nonzero = false;
        for class in 0..4 {
            let cam = grad_cam(&m, &x, class, "block3").unwrap();
            assert_eq!((cam.height, cam.width), (16, 16));
            assert!(cam.data.iter().all(|v| (0.0..=1.0).contains(v)));
            let max = cam.data.iter().copied().fold(0.0f32, f32::max);
            if max > 0.0 {
                saw_nonzero = true;
                assert_eq!(max, 1.0);
                assert_eq!(cam.data.iter().copied().fold(1.0f32, f32::min), 0.0);
            }
        }
        assert!(saw_nonzero);
        assert!(grad_cam(&m, &x, 0, "head").is_err());
        assert!(grad_cam(&m, &x, 9, "block3").is_err());
    }

    #[test]
    fn grad_cam_zero_gradient_is_zero_map() {
        let m = cnn();
        for (name, var) in m.params().iter() {
            if name.starts_with("head.") {
                var.set(&var.as_tensor().zeros_like().unwrap()).unwrap();
            }
        }
        let x = ImageTensor::filled(3, 16, 16, 0.3).unwrap();
        let cam = grad_cam(&m, &x, 1, "block2").unwrap();
        assert!(cam.data.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn psnr_cases() {
        let a = ImageTensor::filled(3, 5, 5, 0.25).unwrap();
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        let x = vec![0.2; 10];
        let y = vec![0.3; 10];
        assert!((psnr_values(&x, &y).unwrap() - 20.0).abs() < 1e-9);
        let b = ImageTensor::filled(3, 5, 4, 0.25).unwrap();
        assert!(psnr(&a, &b).is_err());
    }

    #[test]
    fn ssim_cases() {
        let mut rng = keyed_rng("ssim", &[0]);
        let a = ImageTensor::new(3, 16, 14, (0..3 * 16 * 14).map(|_| rng.random::<f32>()).collect()).unwrap();
        let b = ImageTensor::new(3, 16, 14, (0..3 * 16 * 14).map(|_| rng.random::<f32>()).collect()).unwrap();
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-9);
        assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-12);
        let zero = ImageTensor::filled(1, 11, 11, 0.0).unwrap();
        let one = ImageTensor::filled(1, 11, 11, 1.0).unwrap();
        assert!(ssim(&zero, &one).unwrap() < 0.01);
        let small = ImageTensor::filled(1, 10, 11, 0.0).unwrap();
        assert!(ssim(&small, &small).is_err());
    }
}
