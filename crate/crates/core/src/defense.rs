//! Input-transformation defenses applied to adversarial images before the
//! victim sees them.
//!
//! All defenses map `[0, 1]` images to `[0, 1]` images of the same shape and
//! are deterministic. Filtering is done in `f64` and rounded back to `f32`
//! once, which keeps constant images bit-exact.

use std::fmt;
use std::str::FromStr;

use image::codecs::jpeg::JpegEncoder;
use image::{ExtendedColorType, GrayImage};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::data::{rgb_to_tensor, tensor_to_rgb};
use crate::error::{Error, Result};
use crate::image::ImageTensor;

/// Version of the JPEG codec crate, recorded in reports.
pub const JPEG_CODEC: &str = "image-0.25.10 encoder / zune-jpeg-0.5.15 decoder";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SmoothKind {
    Gaussian,
    Median,
    Average,
}

/// A preprocessing defense and its parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum DefenseConfig {
    #[default]
    None,
    Smooth { kind: SmoothKind, kernel: usize },
    Jpeg { quality: u8 },
    BitSqueeze { bits: u32 },
}

impl DefenseConfig {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Self::None => Ok(()),
            Self::Smooth { kernel, .. } => check_kernel(kernel),
            Self::Jpeg { quality } => check_quality(quality),
            Self::BitSqueeze { bits } => check_bits(bits),
        }
    }

    pub fn apply(&self, x: &ImageTensor) -> Result<ImageTensor> {
        match *self {
            Self::None => Ok(x.clone()),
            Self::Smooth { kind, kernel } => smooth(x, kind, kernel),
            Self::Jpeg { quality } => jpeg_roundtrip(x, quality),
            Self::BitSqueeze { bits } => bit_squeeze(x, bits),
        }
    }
}

impl fmt::Display for DefenseConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::None => f.write_str("none"),
            Self::Smooth { kind, kernel } => {
                let name = match kind {
                    SmoothKind::Gaussian => "gaussian",
                    SmoothKind::Median => "median",
                    SmoothKind::Average => "average",
                };
                write!(f, "{name}:{kernel}")
            }
            Self::Jpeg { quality } => write!(f, "jpeg:{quality}"),
            Self::BitSqueeze { bits } => write!(f, "bits:{bits}"),
        }
    }
}

impl FromStr for DefenseConfig {
    type Err = Error;

    /// `none`, `gaussian:k`, `median:k`, `average:k`, `jpeg:Q` or `bits:b`.
    /// Smoothing kinds without `:k` use a 3×3 kernel.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let (name, arg) = match s.split_once(':') {
            Some((n, a)) => (n, Some(a)),
            None => (s, None),
        };
        let num = |what: &str| -> Result<u64> {
            arg.ok_or_else(|| Error::Config(format!("defense {name:?} needs a {what}")))?
                .parse::<u64>()
                .map_err(|_| Error::Config(format!("defense {s:?}: {what} must be an integer")))
        };
        let kernel = || -> Result<usize> {
            match arg {
                None => Ok(3),
                Some(_) => Ok(num("kernel size")? as usize),
            }
        };
        let d = match name {
            "none" if arg.is_none() => Self::None,
            "gaussian" => Self::Smooth {
                kind: SmoothKind::Gaussian,
                kernel: kernel()?,
            },
            "median" => Self::Smooth {
                kind: SmoothKind::Median,
                kernel: kernel()?,
            },
            "average" => Self::Smooth {
                kind: SmoothKind::Average,
                kernel: kernel()?,
            },
            "jpeg" => Self::Jpeg {
                quality: u8::try_from(num("quality")?)
                    .map_err(|_| Error::Config(format!("JPEG quality out of range in {s:?}")))?,
            },
            "bits" => Self::BitSqueeze {
                bits: u32::try_from(num("bit depth")?)
                    .map_err(|_| Error::Config(format!("bit depth out of range in {s:?}")))?,
            },
            _ => return Err(Error::Config(format!("unknown defense {s:?}"))),
        };
        d.validate().map_err(|e| match e {
            Error::InvalidArgument(m) => Error::Config(m),
            other => other,
        })?;
        Ok(d)
    }
}

impl Serialize for DefenseConfig {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for DefenseConfig {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

fn check_kernel(kernel: usize) -> Result<()> {
    if kernel < 3 || kernel.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!(
            "smoothing kernel must be odd and at least 3, got {kernel}"
        )));
    }
    Ok(())
}

fn check_quality(q: u8) -> Result<()> {
    if !(1..=100).contains(&q) {
        return Err(Error::InvalidArgument(format!("JPEG quality must lie in [1, 100], got {q}")));
    }
    Ok(())
}

fn check_bits(bits: u32) -> Result<()> {
    if !(1..=8).contains(&bits) {
        return Err(Error::InvalidArgument(format!("bit depth must lie in [1, 8], got {bits}")));
    }
    Ok(())
}

/// Reflect-101 index (`dcb|abcd|cba`), valid for any offset when `n > 1`.
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut m = i.rem_euclid(period);
    if m >= n as isize {
        m = period - m;
    }
    m as usize
}

/// Standard deviation used for a Gaussian kernel of the given size.
pub fn gaussian_sigma(kernel: usize) -> f64 {
    0.3 * ((kernel as f64 - 1.0) / 2.0 - 1.0) + 0.8
}

/// Normalized 1D Gaussian taps.
pub fn gaussian_taps(kernel: usize) -> Vec<f64> {
    let sigma = gaussian_sigma(kernel);
    let r = (kernel / 2) as f64;
    let taps: Vec<f64> = (0..kernel)
        .map(|i| {
            let d = i as f64 - r;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let sum: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / sum).collect()
}

/// Per-channel 2D filtering with reflect padding, clamped to `[0, 1]`.
pub fn smooth(x: &ImageTensor, kind: SmoothKind, kernel: usize) -> Result<ImageTensor> {
    check_kernel(kernel)?;
    let (c, h, w) = x.shape();
    let r = (kernel / 2) as isize;
    let taps = gaussian_taps(kernel);
    let mut out = vec![0f32; c * h * w];
    let mut window = Vec::with_capacity(kernel * kernel);
    for ch in 0..c {
        let plane = x.plane(ch);
        for y in 0..h {
            for xx in 0..w {
                window.clear();
                let mut weighted = 0f64;
                for dy in -r..=r {
                    let sy = reflect(y as isize + dy, h);
                    for dx in -r..=r {
                        let sx = reflect(xx as isize + dx, w);
                        let v = plane[sy * w + sx] as f64;
                        match kind {
                            SmoothKind::Gaussian => {
                                weighted += taps[(dy + r) as usize] * taps[(dx + r) as usize] * v
                            }
                            _ => window.push(v),
                        }
                    }
                }
                let v = match kind {
                    SmoothKind::Gaussian => weighted,
                    SmoothKind::Average => window.iter().sum::<f64>() / window.len() as f64,
                    SmoothKind::Median => {
                        let mid = window.len() / 2;
                        *window.select_nth_unstable_by(mid, |a, b| a.total_cmp(b)).1
                    }
                };
                out[ch * h * w + y * w + xx] = v.clamp(0.0, 1.0) as f32;
            }
        }
    }
    ImageTensor::new(c, h, w, out)
}

/// Baseline JPEG encode at `quality`, then decode back to `[0, 1]`.
pub fn jpeg_roundtrip(x: &ImageTensor, quality: u8) -> Result<ImageTensor> {
    check_quality(quality)?;
    let (c, h, w) = x.shape();
    let mut buf = Vec::new();
    let mut enc = JpegEncoder::new_with_quality(&mut buf, quality);
    let codec = |e: image::ImageError| Error::Codec(e.to_string());
    if c == 1 {
        let gray = GrayImage::from_fn(w as u32, h as u32, |xx, y| {
            image::Luma([(x.get(0, y as usize, xx as usize) * 255.0).round().clamp(0.0, 255.0) as u8])
        });
        enc.encode(gray.as_raw(), w as u32, h as u32, ExtendedColorType::L8).map_err(codec)?;
    } else {
        let rgb = tensor_to_rgb(x);
        enc.encode(rgb.as_raw(), w as u32, h as u32, ExtendedColorType::Rgb8).map_err(codec)?;
    }
    let decoded = image::load_from_memory_with_format(&buf, image::ImageFormat::Jpeg).map_err(codec)?;
    if (decoded.height() as usize, decoded.width() as usize) != (h, w) {
        return Err(Error::Codec("JPEG decoder changed the image size".into()));
    }
    if c == 1 {
        let g = decoded.to_luma8();
        let data = g.as_raw().iter().map(|&v| v as f32 / 255.0).collect();
        ImageTensor::new(1, h, w, data)
    } else {
        Ok(rgb_to_tensor(&decoded.to_rgb8()))
    }
}

/// `round(x·(2^b − 1)) / (2^b − 1)` with half-away-from-zero rounding.
pub fn bit_squeeze(x: &ImageTensor, bits: u32) -> Result<ImageTensor> {
    check_bits(bits)?;
    let levels = ((1u32 << bits) - 1) as f64;
    let (c, h, w) = x.shape();
    let data = x
        .data()
        .iter()
        .map(|&v| ((v as f64 * levels).round() / levels) as f32)
        .collect();
    ImageTensor::new(c, h, w, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::keyed_rng;
    use rand::Rng;

    fn noise(c: usize, h: usize, w: usize, seed: u64) -> ImageTensor {
        let mut rng = keyed_rng("defense-test", &[seed]);
        let d = (0..c * h * w).map(|_| rng.random::<f32>()).collect();
        ImageTensor::new(c, h, w, d).unwrap()
    }

    #[test]
    fn parse_and_display_roundtrip() {
        for s in ["none", "gaussian:5", "median:3", "average:7", "jpeg:75", "bits:4"] {
            let d: DefenseConfig = s.parse().unwrap();
            assert_eq!(d.to_string(), s);
        }
        assert_eq!(
            "median".parse::<DefenseConfig>().unwrap(),
            DefenseConfig::Smooth {
                kind: SmoothKind::Median,
                kernel: 3
            }
        );
        for bad in ["gaussian:4", "jpeg:0", "jpeg:101", "bits:9", "bits:0", "blur", "jpeg", "none:3"] {
            assert!(matches!(bad.parse::<DefenseConfig>(), Err(Error::Config(_))), "{bad}");
        }
    }

    #[test]
    fn reflect_101_indices() {
        let idx: Vec<usize> = (-3..7).map(|i| reflect(i, 4)).collect();
        assert_eq!(idx, vec![3, 2, 1, 0, 1, 2, 3, 2, 1, 0]);
    }

    #[test]
    fn gaussian_sigma_convention() {
        assert!((gaussian_sigma(3) - 0.8).abs() < 1e-12);
        assert!((gaussian_sigma(5) - 1.1).abs() < 1e-12);
        assert!((gaussian_taps(7).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn average_of_centered_impulse() {
        let mut d = vec![0f32; 25];
        d[12] = 1.0;
        let x = ImageTensor::new(1, 5, 5, d).unwrap();
        let y = smooth(&x, SmoothKind::Average, 3).unwrap();
        for yy in 0..5 {
            for xx in 0..5 {
                let covered = (1..=3).contains(&yy) && (1..=3).contains(&xx);
                let expect = if covered { 1.0 / 9.0 } else { 0.0 };
                assert!((y.get(0, yy, xx) - expect).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn constants_are_preserved_exactly() {
        for v in [0.0f32, 0.1, 0.37, 1.0 / 3.0, 1.0] {
            let x = ImageTensor::filled(3, 9, 7, v).unwrap();
            for kind in [SmoothKind::Gaussian, SmoothKind::Median, SmoothKind::Average] {
                for k in [3, 5, 7] {
                    assert_eq!(smooth(&x, kind, k).unwrap(), x, "{kind:?} {k} {v}");
                }
            }
        }
    }

    #[test]
    fn median_keeps_binary_values() {
        let x = noise(1, 10, 10, 1);
        let bin = ImageTensor::new(1, 10, 10, x.data().iter().map(|v| v.round()).collect()).unwrap();
        let y = smooth(&bin, SmoothKind::Median, 5).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn even_kernel_rejected() {
        assert!(smooth(&noise(1, 4, 4, 0), SmoothKind::Gaussian, 4).is_err());
    }

    #[test]
    fn bit_squeeze_cases() {
        let x = ImageTensor::filled(1, 2, 2, 0.6).unwrap();
        assert!(bit_squeeze(&x, 1).unwrap().data().iter().all(|&v| v == 1.0));
        // exactly half a level rounds away from zero
        let half = ImageTensor::filled(1, 1, 1, 0.5).unwrap();
        assert_eq!(bit_squeeze(&half, 1).unwrap().data(), &[1.0]);
        let q8 = ImageTensor::new(1, 1, 256, (0..256).map(|i| i as f32 / 255.0).collect()).unwrap();
        assert_eq!(bit_squeeze(&q8, 8).unwrap(), q8);
        assert!(bit_squeeze(&x, 0).is_err());
        assert!(bit_squeeze(&x, 9).is_err());
    }

    #[test]
    fn jpeg_keeps_shape_and_range() {
        for c in [1, 3] {
            let x = noise(c, 13, 17, 4);
            let y = jpeg_roundtrip(&x, 75).unwrap();
            assert_eq!(y.shape(), x.shape());
            assert!(y.data().iter().all(|v| (0.0..=1.0).contains(v)));
            assert_eq!(jpeg_roundtrip(&x, 75).unwrap(), y);
        }
        assert!(jpeg_roundtrip(&noise(3, 4, 4, 0), 0).is_err());
    }
}
