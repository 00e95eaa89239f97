//! Target-class latents: the 2D tensors that condition the generator.
//!
//! Latents are produced once per class, before training, either by an external
//! text-to-image diffusion pipeline (imported from disk) or by the seeded
//! pseudo-latent provider used for desk-scale runs. The generator sees them
//! only through [`LatentProjector`], which maps the raw `4×64×64` tensor onto
//! the encoder's feature-map grid.
//!
//! # File format
//!
//! One file per class, named `<class_id>.lat`, little-endian throughout:
//!
//! | offset | size | field                                   |
//! |--------|------|-----------------------------------------|
//! | 0      | 6    | magic `ADVLAT`                          |
//! | 6      | 1    | format version (`1`)                    |
//! | 7      | 1    | reserved, zero                          |
//! | 8      | 4    | class id (`u32`)                        |
//! | 12     | 12   | shape `(channels, height, width)` `u32` |
//! | 24     | 4·n  | `f32` data, row-major                   |

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{adaptive_pool_matrix, keyed_rng, resample_2d, ParamStore};

pub const LATENT_CHANNELS: usize = 4;
pub const LATENT_SIZE: usize = 64;
const LATENT_LEN: usize = LATENT_CHANNELS * LATENT_SIZE * LATENT_SIZE;

const MAGIC: &[u8; 6] = b"ADVLAT";
const VERSION: u8 = 1;
const HEADER_LEN: usize = 24;

/// A target label and the text prompt used to generate its latent.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TargetClass {
    pub class_id: u32,
    pub prompt: String,
}

impl TargetClass {
    pub fn new(class_id: u32, prompt: impl Into<String>) -> Self {
        Self {
            class_id,
            prompt: prompt.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    ExternalDiffusion,
    Pseudo,
    Imported,
}

/// Raw `4×64×64` latent for one target class.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetLatent {
    data: Vec<f32>,
    class_id: u32,
    provenance: Provenance,
}

impl TargetLatent {
    pub fn new(class_id: u32, data: Vec<f32>, provenance: Provenance) -> Result<Self> {
        if data.len() != LATENT_LEN {
            return Err(Error::shape(
                "target latent",
                [LATENT_CHANNELS, LATENT_SIZE, LATENT_SIZE],
                data.len(),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("latent for class {class_id}")));
        }
        Ok(Self {
            data,
            class_id,
            provenance,
        })
    }

    pub fn class_id(&self) -> u32 {
        self.class_id
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn shape(&self) -> [usize; 3] {
        [LATENT_CHANNELS, LATENT_SIZE, LATENT_SIZE]
    }

    /// `(1, 4, 64, 64)` tensor.
    pub fn to_tensor(&self, device: &Device, dtype: DType) -> Result<Tensor> {
        let t = Tensor::from_slice(
            &self.data,
            (1, LATENT_CHANNELS, LATENT_SIZE, LATENT_SIZE),
            device,
        )?;
        Ok(t.to_dtype(dtype)?)
    }

    /// Bitwise equality of the tensor payload.
    pub fn bits_eq(&self, other: &TargetLatent) -> bool {
        self.data.len() == other.data.len()
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// Variance share of the per-channel class component in pseudo-latents;
/// per-entry noise takes the rest.
///
/// Diffusion latents carry class-level statistics that survive pooling.
/// Purely i.i.d. entries would average out to almost nothing on the feature
/// grid and leave the generator without a usable condition.
pub const PSEUDO_CLASS_SHARE: f32 = 0.9;

/// Deterministic stand-in for a diffusion latent, drawn from a standard
/// normal stream keyed by `(class_id, seed)`. Each entry is marginally
/// standard normal: a per-channel shared draw mixed with per-entry noise.
pub fn make_pseudo_latent(class: &TargetClass, seed: u64) -> TargetLatent {
    let mut rng = keyed_rng("pseudo-latent", &[class.class_id as u64, seed]);
    let shared: Vec<f32> = (0..LATENT_CHANNELS).map(|_| rng.sample(StandardNormal)).collect();
    let (a, b) = (PSEUDO_CLASS_SHARE.sqrt(), (1.0 - PSEUDO_CLASS_SHARE).sqrt());
    let plane = LATENT_LEN / LATENT_CHANNELS;
    let data: Vec<f32> = (0..LATENT_LEN)
        .map(|i| {
            let n: f32 = rng.sample(StandardNormal);
            a * shared[i / plane] + b * n
        })
        .collect();
    TargetLatent {
        data,
        class_id: class.class_id,
        provenance: Provenance::Pseudo,
    }
}

/// Serializes a latent; identical latents produce identical bytes.
pub fn encode_latent(latent: &TargetLatent) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * LATENT_LEN);
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(0);
    out.extend_from_slice(&latent.class_id.to_le_bytes());
    for d in latent.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in &latent.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn export_latent(latent: &TargetLatent, path: &Path) -> Result<()> {
    fs::write(path, encode_latent(latent)).map_err(|e| Error::io(path, e))
}

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4-byte slice"))
}

/// Parses a latent file, reporting missing files, bad magic, shape mismatches
/// and truncation as distinct errors.
pub fn import_latent(path: &Path, class_id: u32) -> Result<TargetLatent> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::BadMagic(path.to_path_buf()));
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::format(path, "truncated header"));
    }
    if bytes[6] != VERSION {
        return Err(Error::format(
            path,
            format!("unsupported latent version {}", bytes[6]),
        ));
    }
    let stored_class = read_u32(&bytes, 8);
    let shape = [
        read_u32(&bytes, 12) as usize,
        read_u32(&bytes, 16) as usize,
        read_u32(&bytes, 20) as usize,
    ];
    if shape != [LATENT_CHANNELS, LATENT_SIZE, LATENT_SIZE] {
        return Err(Error::shape(
            format!("latent file {}", path.display()),
            [LATENT_CHANNELS, LATENT_SIZE, LATENT_SIZE],
            shape,
        ));
    }
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != 4 * LATENT_LEN {
        return Err(Error::format(
            path,
            format!(
                "expected {} payload bytes, found {}",
                4 * LATENT_LEN,
                payload.len()
            ),
        ));
    }
    if stored_class != class_id {
        return Err(Error::LatentMismatch {
            latent: stored_class,
            target: class_id,
        });
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
        .collect();
    TargetLatent::new(class_id, data, Provenance::Imported)
}

/// Imports a headerless little-endian `f32` dump of a `4×64×64` tensor, the
/// layout produced by `array.astype('<f4').tofile(path)` in numpy.
pub fn import_raw_f32(path: &Path, class_id: u32) -> Result<TargetLatent> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != 4 * LATENT_LEN {
        return Err(Error::shape(
            format!("raw latent {}", path.display()),
            4 * LATENT_LEN,
            bytes.len(),
        ));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
        .collect();
    TargetLatent::new(class_id, data, Provenance::ExternalDiffusion)
}

/// Latent after projection onto a `target_h × target_w` grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedLatent {
    pub data: Vec<f32>,
    pub height: usize,
    pub width: usize,
    pub source_class_id: u32,
}

/// 3×3 convolution (4→4 channels, stride 1, padding 1) followed by adaptive
/// average pooling to the encoder grid.
#[derive(Debug, Clone)]
pub struct LatentProjector {
    weight: Tensor,
    bias: Tensor,
}

impl LatentProjector {
    pub fn new(store: &mut ParamStore, name: &str, rng: &mut impl Rng) -> Result<Self> {
        let bound = 1.0 / ((LATENT_CHANNELS * 9) as f64).sqrt();
        let weight = store.uniform(
            &format!("{name}.weight"),
            &[LATENT_CHANNELS, LATENT_CHANNELS, 3, 3],
            bound,
            rng,
        )?;
        let bias = store.uniform(&format!("{name}.bias"), &[LATENT_CHANNELS], bound, rng)?;
        Ok(Self { weight, bias })
    }

    /// Projector whose convolution passes every channel through unchanged.
    pub fn identity(dtype: DType) -> Result<Self> {
        let mut w = vec![0f32; LATENT_CHANNELS * LATENT_CHANNELS * 9];
        for c in 0..LATENT_CHANNELS {
            w[(c * LATENT_CHANNELS + c) * 9 + 4] = 1.0;
        }
        let weight = Tensor::from_vec(w, (LATENT_CHANNELS, LATENT_CHANNELS, 3, 3), &Device::Cpu)?
            .to_dtype(dtype)?;
        let bias = Tensor::zeros(LATENT_CHANNELS, dtype, &Device::Cpu)?;
        Ok(Self { weight, bias })
    }

    /// Projects a `(B, 4, 64, 64)` batch to `(B, 4, target_h, target_w)`.
    pub fn project_tensor(&self, latents: &Tensor, target_h: usize, target_w: usize) -> Result<Tensor> {
        if target_h == 0 || target_w == 0 {
            return Err(Error::InvalidArgument(
                "projection target size must be at least 1×1".into(),
            ));
        }
        let (_, c, h, w) = latents.dims4()?;
        if c != LATENT_CHANNELS {
            return Err(Error::shape("latent channels", LATENT_CHANNELS, c));
        }
        let y = latents.conv2d(&self.weight, 1, 1, 1, 1)?;
        let y = y.broadcast_add(&self.bias.reshape((1, LATENT_CHANNELS, 1, 1))?)?;
        let rows = adaptive_pool_matrix(h, target_h)?;
        let cols = adaptive_pool_matrix(w, target_w)?;
        resample_2d(&y, &rows, target_h, &cols, target_w)
    }

    pub fn project(
        &self,
        latent: &TargetLatent,
        target_h: usize,
        target_w: usize,
    ) -> Result<ProjectedLatent> {
        project_latent(latent, self, target_h, target_w)
    }
}

/// Applies `projector` to a single latent.
pub fn project_latent(
    latent: &TargetLatent,
    projector: &LatentProjector,
    target_h: usize,
    target_w: usize,
) -> Result<ProjectedLatent> {
    if latent.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("latent".into()));
    }
    let t = latent.to_tensor(&Device::Cpu, projector.weight.dtype())?;
    let y = projector.project_tensor(&t, target_h, target_w)?;
    let data = y.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("projected latent".into()));
    }
    Ok(ProjectedLatent {
        data,
        height: target_h,
        width: target_w,
        source_class_id: latent.class_id,
    })
}

/// Per-class latent store; read-only once populated.
#[derive(Debug, Clone, Default)]
pub struct LatentCache {
    latents: BTreeMap<u32, TargetLatent>,
}

impl LatentCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, latent: TargetLatent) {
        self.latents.insert(latent.class_id, latent);
    }

    pub fn get(&self, class_id: u32) -> Result<&TargetLatent> {
        self.latents
            .get(&class_id)
            .ok_or(Error::MissingLatent(class_id))
    }

    pub fn contains(&self, class_id: u32) -> bool {
        self.latents.contains_key(&class_id)
    }

    pub fn len(&self) -> usize {
        self.latents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.latents.is_empty()
    }

    pub fn class_ids(&self) -> impl Iterator<Item = u32> + '_ {
        self.latents.keys().copied()
    }

    pub fn path_for(dir: &Path, class_id: u32) -> PathBuf {
        dir.join(format!("{class_id}.lat"))
    }

    /// Loads every `<class_id>.lat` file in `dir`.
    pub fn load_dir(dir: &Path) -> Result<Self> {
        let mut cache = Self::new();
        let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        let mut paths: Vec<PathBuf> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "lat"))
            .collect();
        paths.sort();
        for p in paths {
            let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
            let Ok(id) = stem.parse::<u32>() else {
                continue;
            };
            cache.insert(import_latent(&p, id)?);
        }
        Ok(cache)
    }

    pub fn save_dir(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut written = Vec::new();
        for latent in self.latents.values() {
            let p = Self::path_for(dir, latent.class_id);
            export_latent(latent, &p)?;
            written.push(p);
        }
        Ok(written)
    }
}

/// Parses a class list: one `<class_id> <prompt>` per line, `#` comments.
pub fn parse_class_list(text: &str) -> Result<Vec<TargetClass>> {
    let mut out: Vec<TargetClass> = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (id, prompt) = line.split_once(char::is_whitespace).unwrap_or((line, ""));
        let class_id: u32 = id.parse().map_err(|_| {
            Error::Config(format!("line {}: bad class id {id:?}", n + 1))
        })?;
        if out.iter().any(|c| c.class_id == class_id) {
            return Err(Error::Config(format!(
                "line {}: duplicate class id {class_id}",
                n + 1
            )));
        }
        out.push(TargetClass::new(class_id, prompt.trim()));
    }
    Ok(out)
}
