//! Desk-scale workspace: synthetic shape datasets, two independently trained
//! small CNNs and a ready-to-run config.
//!
//! Layout written by [`build_workspace`]:
//!
//! ```text
//! <dir>/data/train/     generator training images (+ manifest.csv)
//! <dir>/data/test/      held-out images used for attacks and evaluation
//! <dir>/models/cnn-a.arc  surrogate
//! <dir>/models/cnn-b.arc  independently trained victim
//! <dir>/classes.txt     class list with prompts
//! <dir>/toy.cfg         run config referencing the files above
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use crate::archive::write_atomic;
use crate::classifier::{
    accuracy, train_classifier, Classifier, ClassifierTraining, CnnArch, CnnSpec, Preprocessing, SmallCnn,
};
use crate::data::{save_dataset, synthetic_shapes, Dataset, ShapesConfig, SHAPE_CLASSES};
use crate::error::{Error, Result};
use crate::latent::TargetClass;

pub const SURROGATE_ID: &str = "cnn-a";
pub const VICTIM_ID: &str = "cnn-b";
pub const IMAGE_SIZE: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct ToyConfig {
    /// Generator training images per class.
    pub per_class: usize,
    /// Held-out images per class.
    pub test_per_class: usize,
    /// Classifier training images per class (a separate draw).
    pub classifier_per_class: usize,
    pub classifier_epochs: usize,
    /// Generator learning rate written into the config.
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            per_class: 192,
            test_per_class: 16,
            classifier_per_class: 128,
            classifier_epochs: 14,
            learning_rate: 1e-3,
            epochs: 10,
            seed: 0,
        }
    }
}

/// Per-channel standardization shared by both toy classifiers.
pub fn toy_preprocessing() -> Preprocessing {
    Preprocessing {
        input_height: IMAGE_SIZE,
        input_width: IMAGE_SIZE,
        mean: vec![0.5; 3],
        std: vec![0.25; 3],
    }
}

pub fn toy_classes() -> Vec<TargetClass> {
    SHAPE_CLASSES
        .iter()
        .enumerate()
        .map(|(i, name)| TargetClass::new(i as u32, format!("a {name} on a plain background")))
        .collect()
}

/// `<id> <prompt>` lines accepted by [`crate::latent::parse_class_list`].
pub fn class_list_text(classes: &[TargetClass]) -> String {
    classes
        .iter()
        .map(|c| format!("{} {}\n", c.class_id, c.prompt))
        .collect()
}

pub struct ToyData {
    pub train: Dataset,
    pub test: Dataset,
    pub classifier_train: Dataset,
}

pub fn toy_data(cfg: &ToyConfig) -> Result<ToyData> {
    let draw = |per_class, offset: u64| {
        synthetic_shapes(&ShapesConfig {
            per_class,
            size: IMAGE_SIZE,
            seed: cfg.seed * 16 + offset,
            ..Default::default()
        })
    };
    Ok(ToyData {
        train: draw(cfg.per_class, 0)?,
        test: draw(cfg.test_per_class, 1)?,
        classifier_train: draw(cfg.classifier_per_class, 2)?,
    })
}

/// Trains the surrogate (cnn-a) and the victim (cnn-b) with distinct
/// architectures and seeds.
pub fn toy_classifiers(cfg: &ToyConfig, data: &Dataset) -> Result<(SmallCnn, SmallCnn)> {
    let labels = data.labels_or_err()?;
    let mut out = Vec::with_capacity(2);
    for (k, (id, arch)) in [(SURROGATE_ID, CnnArch::CnnA), (VICTIM_ID, CnnArch::CnnB)].into_iter().enumerate() {
        let seed = cfg.seed * 16 + 1 + k as u64;
        let spec = CnnSpec {
            arch,
            in_channels: 3,
            num_classes: SHAPE_CLASSES.len(),
            preprocessing: toy_preprocessing(),
        };
        let model = SmallCnn::new(id, spec, seed)?;
        let tc = ClassifierTraining {
            epochs: cfg.classifier_epochs,
            seed,
            ..Default::default()
        };
        let losses = train_classifier(&model, &data.images, labels, &tc)?;
        log::info!("{id}: final classifier loss {:.4}", losses.last().copied().unwrap_or(f64::NAN));
        out.push(model);
    }
    let victim = out.pop().expect("two models");
    let surrogate = out.pop().expect("two models");
    Ok((surrogate, victim))
}

pub fn config_text(cfg: &ToyConfig) -> String {
    let targets: Vec<String> = (0..SHAPE_CLASSES.len()).map(|i| i.to_string()).collect();
    format!(
        "# desk-scale run over the synthetic shape classes\n\
         surrogate = {SURROGATE_ID}\n\
         targets = {}\n\
         epochs = {}\n\
         learning_rate = {}\n\
         batch_size = 16\n\
         epsilon = 16/255\n\
         grid_n = 3\n\
         mask_prob = 1.0\n\
         seed = {}\n\
         image_size = {IMAGE_SIZE}\n\
         base_channels = 16\n\
         key_dim = 16\n\
         reduction = 4\n\
         fusion = full\n\
         \n\
         model.{SURROGATE_ID}.weights = models/{SURROGATE_ID}.arc\n\
         model.{SURROGATE_ID}.cam_layer = block3\n\
         model.{VICTIM_ID}.weights = models/{VICTIM_ID}.arc\n\
         model.{VICTIM_ID}.cam_layer = block3\n",
        targets.join(", "),
        cfg.epochs,
        cfg.learning_rate,
        cfg.seed,
    )
}

#[derive(Debug, Clone)]
pub struct ToyWorkspace {
    pub root: PathBuf,
    pub config: PathBuf,
    pub classes: PathBuf,
    pub train_dir: PathBuf,
    pub test_dir: PathBuf,
    pub models: Vec<PathBuf>,
    /// Clean test accuracy of (surrogate, victim).
    pub accuracy: (f64, f64),
}

impl ToyWorkspace {
    /// Every file written, sorted.
    pub fn files(&self) -> Result<Vec<PathBuf>> {
        let mut out = vec![self.config.clone(), self.classes.clone()];
        out.extend(self.models.iter().cloned());
        for d in [&self.train_dir, &self.test_dir] {
            let mut entries: Vec<PathBuf> = fs::read_dir(d)
                .map_err(|e| Error::io(d, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .collect();
            entries.sort();
            out.extend(entries);
        }
        Ok(out)
    }
}

/// Writes the full toy workspace into `dir`.
pub fn build_workspace(dir: &Path, cfg: &ToyConfig) -> Result<ToyWorkspace> {
    if cfg.per_class == 0 || cfg.test_per_class == 0 || cfg.classifier_per_class == 0 {
        return Err(Error::Config("toy image counts must be positive".into()));
    }
    let data = toy_data(cfg)?;
    let (surrogate, victim) = toy_classifiers(cfg, &data.classifier_train)?;
    let labels = data.test.labels_or_err()?;
    let acc = (
        accuracy(&surrogate, &data.test.images, labels)?,
        accuracy(&victim, &data.test.images, labels)?,
    );
    log::info!("clean test accuracy: {SURROGATE_ID} {:.4}, {VICTIM_ID} {:.4}", acc.0, acc.1);

    let train_dir = dir.join("data").join("train");
    let test_dir = dir.join("data").join("test");
    save_dataset(&train_dir, &data.train)?;
    save_dataset(&test_dir, &data.test)?;
    let model_dir = dir.join("models");
    fs::create_dir_all(&model_dir).map_err(|e| Error::io(&model_dir, e))?;
    let mut models = Vec::new();
    for m in [&surrogate, &victim] {
        let p = model_dir.join(format!("{}.arc", m.id()));
        m.save(&p)?;
        models.push(p);
    }
    let classes = dir.join("classes.txt");
    write_atomic(&classes, class_list_text(&toy_classes()).as_bytes())?;
    let config = dir.join("toy.cfg");
    write_atomic(&config, config_text(cfg).as_bytes())?;
    Ok(ToyWorkspace {
        root: dir.to_path_buf(),
        config,
        classes,
        train_dir,
        test_dir,
        models,
        accuracy: acc,
    })
}
