//! Image datasets on disk and the synthetic colored-shapes set used for
//! desk-scale experiments.
//!
//! A dataset directory holds image files plus an optional `manifest.csv` with
//! `file,label` rows. Without a manifest every PNG/JPEG file in the directory
//! is used, in file-name order, and labels are absent.

use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::{DynamicImage, RgbImage};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::archive::write_atomic;
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::nn::keyed_rng;

pub const MANIFEST: &str = "manifest.csv";

/// Class names of the synthetic set, indexed by label.
pub const SHAPE_CLASSES: [&str; 8] = [
    "disk", "square", "triangle", "ring", "plus", "h-stripes", "v-stripes", "checker",
];

#[derive(Debug, Clone, Default)]
pub struct Dataset {
    /// File names relative to the dataset directory.
    pub files: Vec<String>,
    pub images: Vec<ImageTensor>,
    pub labels: Option<Vec<u32>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn labels_or_err(&self) -> Result<&[u32]> {
        self.labels
            .as_deref()
            .ok_or_else(|| Error::InvalidArgument("dataset has no labels (missing manifest.csv)".into()))
    }

    /// Keeps the items at `idx`, in that order.
    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            files: idx.iter().map(|&i| self.files[i].clone()).collect(),
            images: idx.iter().map(|&i| self.images[i].clone()).collect(),
            labels: self
                .labels
                .as_ref()
                .map(|l| idx.iter().map(|&i| l[i]).collect()),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestRow {
    file: String,
    label: u32,
}

/// Decodes an image file to `[0, 1]` RGB, resized to `size` when given.
pub fn read_image(path: &Path, size: Option<(usize, usize)>) -> Result<ImageTensor> {
    let img = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::format(path, other.to_string()),
    })?;
    let mut rgb = img.to_rgb8();
    if let Some((h, w)) = size {
        if (rgb.height() as usize, rgb.width() as usize) != (h, w) {
            rgb = image::imageops::resize(&rgb, w as u32, h as u32, FilterType::Triangle);
        }
    }
    Ok(rgb_to_tensor(&rgb))
}

pub fn rgb_to_tensor(rgb: &RgbImage) -> ImageTensor {
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut data = vec![0f32; 3 * h * w];
    for (x, y, p) in rgb.enumerate_pixels() {
        for c in 0..3 {
            data[c * h * w + y as usize * w + x as usize] = p[c] as f32 / 255.0;
        }
    }
    ImageTensor::new(3, h, w, data).expect("decoded pixels lie in [0, 1]")
}

/// 8-bit RGB rendering (grayscale images are replicated), rounding to the
/// nearest level.
pub fn tensor_to_rgb(img: &ImageTensor) -> RgbImage {
    let (c, h, w) = img.shape();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |ch: usize| {
            let v = img.get(ch.min(c - 1), y as usize, x as usize);
            (v * 255.0).round().clamp(0.0, 255.0) as u8
        };
        image::Rgb([px(0), px(1), px(2)])
    })
}

pub fn write_png(path: &Path, img: &ImageTensor) -> Result<()> {
    let mut buf = std::io::Cursor::new(Vec::new());
    DynamicImage::ImageRgb8(tensor_to_rgb(img))
        .write_to(&mut buf, image::ImageFormat::Png)
        .map_err(|e| Error::Codec(e.to_string()))?;
    write_atomic(path, buf.get_ref())
}

fn is_image_file(p: &Path) -> bool {
    matches!(
        p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("png" | "jpg" | "jpeg")
    )
}

/// Loads a dataset directory (see the module docs).
pub fn load_dataset(dir: &Path, size: Option<(usize, usize)>) -> Result<Dataset> {
    if !dir.is_dir() {
        return Err(Error::MissingFile(dir.to_path_buf()));
    }
    let manifest = dir.join(MANIFEST);
    let (files, labels) = if manifest.exists() {
        let mut rdr = csv::Reader::from_path(&manifest)
            .map_err(|e| Error::format(&manifest, e.to_string()))?;
        let mut files = Vec::new();
        let mut labels = Vec::new();
        for row in rdr.deserialize::<ManifestRow>() {
            let row = row.map_err(|e| Error::format(&manifest, e.to_string()))?;
            files.push(row.file);
            labels.push(row.label);
        }
        (files, Some(labels))
    } else {
        let mut files: Vec<String> = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file() && is_image_file(p))
            .filter_map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
            .collect();
        files.sort();
        (files, None)
    };
    if files.is_empty() {
        return Err(Error::EmptyInput(format!("no images in {}", dir.display())));
    }
    let images = files
        .iter()
        .map(|f| read_image(&dir.join(f), size))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { files, images, labels })
}

/// Writes images as PNG files plus a manifest when labels are present.
pub fn save_dataset(dir: &Path, data: &Dataset) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (f, img) in data.files.iter().zip(&data.images) {
        write_png(&dir.join(f), img)?;
    }
    if let Some(labels) = &data.labels {
        let mut w = csv::Writer::from_writer(Vec::new());
        for (f, l) in data.files.iter().zip(labels) {
            w.serialize(ManifestRow {
                file: f.clone(),
                label: *l,
            })
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::InvalidArgument(e.to_string()))?;
        write_atomic(&dir.join(MANIFEST), &bytes)?;
    }
    Ok(())
}

/// Options for [`synthetic_shapes`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapesConfig {
    pub per_class: usize,
    pub size: usize,
    pub noise_std: f32,
    /// Range of the largest per-channel foreground/background difference.
    pub contrast: (f32, f32),
    pub seed: u64,
}

impl Default for ShapesConfig {
    fn default() -> Self {
        Self {
            per_class: 128,
            size: 32,
            noise_std: 0.02,
            contrast: (0.18, 0.3),
            seed: 0,
        }
    }
}

fn inside(class: usize, dx: f32, dy: f32, r: f32, phase: f32) -> bool {
    let d = (dx * dx + dy * dy).sqrt();
    let period = (r / 2.0).max(2.0);
    match class {
        0 => d <= r,
        1 => dx.abs() <= 0.85 * r && dy.abs() <= 0.85 * r,
        // upward triangle with apex at -r and base at +0.8r
        2 => dy >= -r && dy <= 0.8 * r && dx.abs() <= (dy + r) * 0.6,
        3 => d <= r && d >= 0.55 * r,
        4 => (dx.abs() <= 0.3 * r && dy.abs() <= r) || (dy.abs() <= 0.3 * r && dx.abs() <= r),
        5 => dx.abs() <= r && dy.abs() <= r && ((dy + r + phase) / period).floor() as i32 % 2 == 0,
        6 => dx.abs() <= r && dy.abs() <= r && ((dx + r + phase) / period).floor() as i32 % 2 == 0,
        7 => {
            dx.abs() <= r
                && dy.abs() <= r
                && ((((dx + r) / period).floor() + ((dy + r) / period).floor()) as i32) % 2 == 0
        }
        _ => false,
    }
}

/// Renders one image of shape class `class` (0..8).
pub fn render_shape(
    class: usize,
    size: usize,
    noise_std: f32,
    contrast: (f32, f32),
    rng: &mut impl Rng,
) -> Result<ImageTensor> {
    if class >= SHAPE_CLASSES.len() {
        return Err(Error::InvalidArgument(format!("shape class {class} out of range")));
    }
    if size < 16 {
        return Err(Error::InvalidArgument(format!("shape images need size ≥ 16, got {size}")));
    }
    let s = size as f32;
    let (lo, hi) = contrast;
    if !(0.0 < lo && lo <= hi && hi < 0.5) {
        return Err(Error::InvalidArgument(format!("contrast range {lo}..{hi} must lie in (0, 0.5)")));
    }
    // background far enough from 0 and 1 that the foreground never clips
    let bg: [f32; 3] = std::array::from_fn(|_| rng.random_range(hi..1.0 - hi));
    let k = rng.random_range(lo..=hi);
    let dir: [f32; 3] = std::array::from_fn(|_| rng.random_range(-1.0f32..1.0));
    let peak = dir.iter().fold(0f32, |m, v| m.max(v.abs())).max(1e-3);
    let fg: [f32; 3] = std::array::from_fn(|c| bg[c] + k * dir[c] / peak);
    let r = s * rng.random_range(0.2..0.3);
    let cx = rng.random_range(r + 1.0..s - r - 1.0);
    let cy = rng.random_range(r + 1.0..s - r - 1.0);
    let phase = rng.random_range(0.0..2.0);
    let noise = Normal::new(0.0f32, noise_std.max(0.0))
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut data = vec![0f32; 3 * size * size];
    for y in 0..size {
        for x in 0..size {
            let hit = inside(class, x as f32 + 0.5 - cx, y as f32 + 0.5 - cy, r, phase);
            let col = if hit { &fg } else { &bg };
            for c in 0..3 {
                let v = col[c] + if noise_std > 0.0 { noise.sample(rng) } else { 0.0 };
                // quantize so PNG storage is lossless
                data[c * size * size + y * size + x] = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
            }
        }
    }
    ImageTensor::new(3, size, size, data)
}

/// Labeled synthetic set with classes interleaved (`0, 1, …, 7, 0, 1, …`).
pub fn synthetic_shapes(cfg: &ShapesConfig) -> Result<Dataset> {
    let mut rng = keyed_rng("synthetic-shapes", &[cfg.seed]);
    let n = cfg.per_class * SHAPE_CLASSES.len();
    let mut out = Dataset {
        files: Vec::with_capacity(n),
        images: Vec::with_capacity(n),
        labels: Some(Vec::with_capacity(n)),
    };
    for i in 0..n {
        let class = i % SHAPE_CLASSES.len();
        out.images.push(render_shape(class, cfg.size, cfg.noise_std, cfg.contrast, &mut rng)?);
        out.files.push(format!("img_{i:05}.png"));
        out.labels.as_mut().expect("labels").push(class as u32);
    }
    Ok(out)
}

/// Path of the dataset manifest inside `dir`.
pub fn manifest_path(dir: &Path) -> PathBuf {
    dir.join(MANIFEST)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_set_is_deterministic_and_balanced() {
        let cfg = ShapesConfig {
            per_class: 3,
            ..Default::default()
        };
        let a = synthetic_shapes(&cfg).unwrap();
        let b = synthetic_shapes(&cfg).unwrap();
        assert_eq!(a.images, b.images);
        let labels = a.labels.unwrap();
        for c in 0..8u32 {
            assert_eq!(labels.iter().filter(|&&l| l == c).count(), 3);
        }
    }

    #[test]
    fn disk_roundtrip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let data = synthetic_shapes(&ShapesConfig {
            per_class: 1,
            ..Default::default()
        })
        .unwrap();
        save_dataset(dir.path(), &data).unwrap();
        let back = load_dataset(dir.path(), None).unwrap();
        assert_eq!(back.files, data.files);
        assert_eq!(back.labels, data.labels);
        assert_eq!(back.images, data.images);
    }

    #[test]
    fn directory_without_manifest_is_unlabeled_and_resized() {
        let dir = tempfile::tempdir().unwrap();
        let img = ImageTensor::filled(3, 20, 20, 0.2).unwrap();
        write_png(&dir.path().join("b.png"), &img).unwrap();
        write_png(&dir.path().join("a.png"), &img).unwrap();
        fs::write(dir.path().join("notes.txt"), "x").unwrap();
        let d = load_dataset(dir.path(), Some((8, 8))).unwrap();
        assert_eq!(d.files, vec!["a.png", "b.png"]);
        assert!(d.labels.is_none());
        assert_eq!(d.images[0].shape(), (3, 8, 8));
    }

    #[test]
    fn empty_and_missing_directories() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_dataset(dir.path(), None), Err(Error::EmptyInput(_))));
        assert!(matches!(
            load_dataset(&dir.path().join("nope"), None),
            Err(Error::MissingFile(_))
        ));
    }
}
