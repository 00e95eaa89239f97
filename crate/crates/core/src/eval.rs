//! Crafting adversarial examples from a trained generator and measuring
//! targeted attack success across victims and defenses.

use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device};
use serde::{Deserialize, Serialize};

use crate::archive::{write_atomic, TensorArchive};
use crate::classifier::Classifier;
use crate::defense::{DefenseConfig, JPEG_CODEC};
use crate::error::{Error, Result};
use crate::generator::Generator;
use crate::image::{stack_images, unstack_images, ImageTensor, Perturbation};
use crate::latent::{TargetClass, TargetLatent};
use crate::nn::NamedArray;
use crate::train::make_adversarial_tensor;

/// Images per generator forward pass.
pub const CRAFT_CHUNK: usize = 64;

/// Adversarial images for one target, with the perturbations that made them.
#[derive(Debug, Clone, PartialEq)]
pub struct AdvBatch {
    pub target: TargetClass,
    pub epsilon: f64,
    pub surrogate_id: String,
    pub checkpoint_hash: String,
    /// Training seed of the generator that crafted the batch.
    pub seed: u64,
    /// Source image names, parallel to `advs`.
    pub files: Vec<String>,
    pub advs: Vec<ImageTensor>,
    pub deltas: Vec<Perturbation>,
}

/// `clamp(x + G(x, latent), 0, 1)` for every image, without masking.
pub fn craft(
    images: &[ImageTensor],
    generator: &Generator,
    target: &TargetClass,
    latent: &TargetLatent,
) -> Result<Vec<ImageTensor>> {
    Ok(craft_with_deltas(images, generator, target, latent)?.0)
}

/// As [`craft`], also returning the unclamped perturbations.
pub fn craft_with_deltas(
    images: &[ImageTensor],
    generator: &Generator,
    target: &TargetClass,
    latent: &TargetLatent,
) -> Result<(Vec<ImageTensor>, Vec<Perturbation>)> {
    if latent.class_id() != target.class_id {
        return Err(Error::LatentMismatch {
            latent: latent.class_id(),
            target: target.class_id,
        });
    }
    let dev = Device::Cpu;
    let dtype = generator.dtype();
    let z = latent.to_tensor(&dev, dtype)?;
    let eps = generator.config().epsilon as f32;
    let mut advs = Vec::with_capacity(images.len());
    let mut deltas = Vec::with_capacity(images.len());
    for part in images.chunks(CRAFT_CHUNK) {
        let x = stack_images(part, &dev, dtype)?;
        let delta = generator.forward_batch(&x, &z)?;
        let adv = make_adversarial_tensor(&x, &delta)?;
        advs.extend(unstack_images(&adv.to_dtype(DType::F32)?)?);
        for i in 0..part.len() {
            deltas.push(Perturbation::from_tensor(&delta.get(i)?, eps)?);
        }
    }
    Ok((advs, deltas))
}

/// Count of images the victim assigns to `target` after `defense`.
pub fn count_successes(
    advs: &[ImageTensor],
    victim: &dyn Classifier,
    target: &TargetClass,
    defense: &DefenseConfig,
) -> Result<usize> {
    if advs.is_empty() {
        return Err(Error::EmptyInput("adversarial image list".into()));
    }
    let defended = advs
        .iter()
        .map(|a| defense.apply(a))
        .collect::<Result<Vec<_>>>()?;
    let preds = victim.predict(&defended, CRAFT_CHUNK)?;
    Ok(preds.iter().filter(|&&p| p == target.class_id).count())
}

/// Fraction of adversarial images classified as `target`.
pub fn attack_success_rate(
    advs: &[ImageTensor],
    victim: &dyn Classifier,
    target: &TargetClass,
    defense: &DefenseConfig,
) -> Result<f64> {
    Ok(count_successes(advs, victim, target, defense)? as f64 / advs.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackRecord {
    pub surrogate_id: String,
    pub victim_id: String,
    pub target_class: u32,
    pub defense: DefenseConfig,
    pub n_images: usize,
    pub n_success: usize,
    pub asr: f64,
    /// Victim and surrogate are the same model.
    pub white_box: bool,
}

impl AttackRecord {
    pub fn new(
        surrogate_id: &str,
        victim_id: &str,
        target_class: u32,
        defense: DefenseConfig,
        n_images: usize,
        n_success: usize,
    ) -> Self {
        Self {
            surrogate_id: surrogate_id.to_string(),
            victim_id: victim_id.to_string(),
            target_class,
            defense,
            n_images,
            n_success,
            asr: if n_images == 0 { 0.0 } else { n_success as f64 / n_images as f64 },
            white_box: surrogate_id == victim_id,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub epsilon: f64,
    pub checkpoint_hash: String,
    pub seed: u64,
    pub jpeg_codec: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub meta: ReportMeta,
    pub records: Vec<AttackRecord>,
}

impl AttackReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::InvalidArgument(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::InvalidArgument(format!("bad attack report: {e}")))
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.records {
            w.serialize(r).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::InvalidArgument(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::InvalidArgument(e.to_string()))
    }

    pub fn records_from_csv(text: &str) -> Result<Vec<AttackRecord>> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        r.deserialize()
            .map(|row| row.map_err(|e| Error::InvalidArgument(format!("bad report row: {e}"))))
            .collect()
    }

    /// Writes `<stem>.json` and `<stem>.csv` next to each other.
    pub fn save(&self, json_path: &Path) -> Result<(PathBuf, PathBuf)> {
        let csv_path = json_path.with_extension("csv");
        write_atomic(json_path, self.to_json()?.as_bytes())?;
        write_atomic(&csv_path, self.to_csv()?.as_bytes())?;
        Ok((json_path.to_path_buf(), csv_path))
    }

    pub fn load(json_path: &Path) -> Result<Self> {
        let text = fs::read_to_string(json_path).map_err(|e| Error::io(json_path, e))?;
        Self::from_json(&text)
    }

    /// Mean ASR over targets for each `(victim, defense)` pair, in first-seen
    /// order.
    pub fn mean_by_victim(&self) -> Vec<(String, DefenseConfig, f64)> {
        let mut out: Vec<(String, DefenseConfig, f64, usize)> = Vec::new();
        for r in &self.records {
            match out.iter_mut().find(|(v, d, _, _)| *v == r.victim_id && *d == r.defense) {
                Some(e) => {
                    e.2 += r.asr;
                    e.3 += 1;
                }
                None => out.push((r.victim_id.clone(), r.defense, r.asr, 1)),
            }
        }
        out.into_iter().map(|(v, d, s, n)| (v, d, s / n as f64)).collect()
    }
}

/// Evaluates crafted batches against every victim and defense.
///
/// Rows are ordered victim-major, then target, then defense.
pub fn evaluate_batches(
    batches: &[AdvBatch],
    victims: &[&dyn Classifier],
    defenses: &[DefenseConfig],
) -> Result<AttackReport> {
    let first = batches
        .first()
        .ok_or_else(|| Error::EmptyInput("no adversarial batches".into()))?;
    let mut records = Vec::new();
    for victim in victims {
        for b in batches {
            for d in defenses {
                let n = count_successes(&b.advs, *victim, &b.target, d)?;
                records.push(AttackRecord::new(
                    &b.surrogate_id,
                    victim.id(),
                    b.target.class_id,
                    *d,
                    b.advs.len(),
                    n,
                ));
            }
        }
    }
    Ok(AttackReport {
        meta: ReportMeta {
            epsilon: first.epsilon,
            checkpoint_hash: first.checkpoint_hash.clone(),
            seed: first.seed,
            jpeg_codec: JPEG_CODEC.to_string(),
        },
        records,
    })
}

/// Full cross-product of victims × targets × defenses for one generator.
#[allow(clippy::too_many_arguments)]
pub fn transfer_matrix(
    generator: &Generator,
    checkpoint_hash: &str,
    surrogate_id: &str,
    victims: &[&dyn Classifier],
    targets: &[(TargetClass, TargetLatent)],
    defenses: &[DefenseConfig],
    images: &[ImageTensor],
    seed: u64,
) -> Result<AttackReport> {
    let mut batches = Vec::with_capacity(targets.len());
    for (t, lat) in targets {
        let (advs, deltas) = craft_with_deltas(images, generator, t, lat)?;
        batches.push(AdvBatch {
            target: t.clone(),
            epsilon: generator.config().epsilon,
            surrogate_id: surrogate_id.to_string(),
            checkpoint_hash: checkpoint_hash.to_string(),
            seed,
            files: (0..images.len()).map(|i| format!("{i}")).collect(),
            advs,
            deltas,
        });
    }
    evaluate_batches(&batches, victims, defenses)
}

fn stack_arrays(name: &str, items: &[&[f32]], shape: (usize, usize, usize)) -> NamedArray {
    let mut data = Vec::with_capacity(items.len() * shape.0 * shape.1 * shape.2);
    for d in items {
        data.extend_from_slice(d);
    }
    NamedArray {
        name: name.into(),
        shape: vec![items.len(), shape.0, shape.1, shape.2],
        data,
    }
}

impl AdvBatch {
    pub fn file_name(class_id: u32) -> String {
        format!("adv_class{class_id:04}.arc")
    }

    /// Lossless float32 storage of the images and perturbations.
    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let shape = self
            .advs
            .first()
            .map(|a| a.shape())
            .ok_or_else(|| Error::EmptyInput("adversarial batch".into()))?;
        let meta = serde_json::json!({
            "target": self.target,
            "epsilon": self.epsilon,
            "surrogate_id": self.surrogate_id,
            "checkpoint_hash": self.checkpoint_hash,
            "seed": self.seed,
            "files": self.files,
        });
        let advs: Vec<&[f32]> = self.advs.iter().map(|a| a.data()).collect();
        let deltas: Vec<&[f32]> = self.deltas.iter().map(|d| d.data()).collect();
        let arc = TensorArchive::new(
            "adversarial",
            meta,
            vec![stack_arrays("adv", &advs, shape), stack_arrays("delta", &deltas, shape)],
        );
        let path = dir.join(Self::file_name(self.target.class_id));
        arc.save(&path)?;
        Ok(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let arc = TensorArchive::load(path)?;
        if arc.kind() != Some("adversarial") {
            return Err(Error::format(path, "not an adversarial batch"));
        }
        #[derive(Deserialize)]
        struct Meta {
            target: TargetClass,
            epsilon: f64,
            surrogate_id: String,
            checkpoint_hash: String,
            seed: u64,
            files: Vec<String>,
        }
        let meta: Meta = serde_json::from_value(arc.meta.clone())
            .map_err(|e| Error::format(path, format!("bad metadata: {e}")))?;
        let get = |name: &str| {
            arc.array(name)
                .ok_or_else(|| Error::format(path, format!("missing array {name}")))
        };
        let (adv, delta) = (get("adv")?, get("delta")?);
        if adv.shape.len() != 4 || adv.shape != delta.shape || adv.shape[0] != meta.files.len() {
            return Err(Error::format(path, "inconsistent array shapes"));
        }
        let (n, c, h, w) = (adv.shape[0], adv.shape[1], adv.shape[2], adv.shape[3]);
        let per = c * h * w;
        let mut advs = Vec::with_capacity(n);
        let mut deltas = Vec::with_capacity(n);
        for i in 0..n {
            advs.push(ImageTensor::new(c, h, w, adv.data[i * per..(i + 1) * per].to_vec())?);
            deltas.push(Perturbation::new(
                c,
                h,
                w,
                delta.data[i * per..(i + 1) * per].to_vec(),
                meta.epsilon as f32,
            )?);
        }
        Ok(Self {
            target: meta.target,
            epsilon: meta.epsilon,
            surrogate_id: meta.surrogate_id,
            checkpoint_hash: meta.checkpoint_hash,
            seed: meta.seed,
            files: meta.files,
            advs,
            deltas,
        })
    }

    /// Every batch file in `dir`, ordered by target class.
    pub fn load_dir(dir: &Path) -> Result<Vec<Self>> {
        let mut paths: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.starts_with("adv_class") && n.ends_with(".arc"))
            })
            .collect();
        paths.sort();
        if paths.is_empty() {
            return Err(Error::EmptyInput(format!("no adversarial batches in {}", dir.display())));
        }
        paths.iter().map(|p| Self::load(p)).collect()
    }
}
