//! Flat `key = value` run configuration.
//!
//! One setting per line, `#` starts a comment, blank lines are ignored.
//! Unknown keys and repeated keys are errors. Model registry entries use
//! `model.<id>.<field>` keys:
//!
//! ```text
//! # training
//! surrogate = cnn-a
//! targets = 0, 1, 2, 3
//! epochs = 10
//!
//! model.cnn-a.weights = models/cnn-a.arc
//! model.cnn-a.cam_layer = block3
//! ```
//!
//! Relative weight paths resolve against the directory of the config file.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::classifier::{ModelRegistry, Preprocessing, SmallCnn};
use crate::error::{Error, Result};
use crate::generator::{FusionMode, GeneratorConfig, DEFAULT_EPSILON};
use crate::latent::TargetClass;
use crate::train::TrainConfig;

/// Top-level keys, with their default (`None`: required for training).
pub const TRAIN_KEYS: &[(&str, Option<&str>)] = &[
    ("surrogate", None),
    ("targets", None),
    ("epochs", Some("10")),
    ("learning_rate", Some("0.0002")),
    ("batch_size", Some("16")),
    ("epsilon", Some("16/255")),
    ("grid_n", Some("3")),
    ("mask_prob", Some("1.0")),
    ("seed", Some("0")),
    ("checkpoint_every", Some("0")),
    ("image_size", Some("224")),
    ("base_channels", Some("64")),
    ("key_dim", Some("64")),
    ("reduction", Some("4")),
    ("fusion", Some("full")),
];

const MODEL_FIELDS: &[&str] = &["weights", "cam_layer", "input_size", "mean", "std"];

/// One registry entry: where the weights live and optional overrides.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ModelEntry {
    pub weights: PathBuf,
    pub cam_layer: Option<String>,
    pub input_size: Option<usize>,
    pub mean: Option<Vec<f32>>,
    pub std: Option<Vec<f32>>,
}

/// Parsed, validated configuration file.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunConfig {
    /// Top-level settings as written (defaults are not inserted here).
    pub settings: BTreeMap<String, String>,
    pub models: BTreeMap<String, ModelEntry>,
}

/// Settings needed by the `train` stage.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSettings {
    pub surrogate: String,
    pub targets: Vec<u32>,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epsilon: f64,
    pub grid_n: usize,
    pub mask_prob: f64,
    pub seed: u64,
    pub checkpoint_every: usize,
    pub generator: GeneratorConfig,
}

impl TrainSettings {
    /// Trainer configuration for `classes` (the resolved `targets`).
    pub fn train_config(&self, target_classes: Vec<TargetClass>) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            epsilon: self.epsilon,
            grid_n: self.grid_n,
            mask_prob: self.mask_prob,
            target_classes,
            surrogate_id: self.surrogate.clone(),
            seed: self.seed,
            checkpoint_every: self.checkpoint_every,
        }
    }
}

fn parse_value<T: FromStr>(key: &str, raw: &str, what: &str) -> Result<T> {
    raw.trim()
        .parse::<T>()
        .map_err(|_| Error::Config(format!("key `{key}`: expected {what}, got `{raw}`")))
}

/// Accepts a decimal number or a fraction `a/b`.
pub fn parse_real(key: &str, raw: &str) -> Result<f64> {
    let v = match raw.split_once('/') {
        Some((a, b)) => {
            let a: f64 = parse_value(key, a, "a number")?;
            let b: f64 = parse_value(key, b, "a number")?;
            if b == 0.0 {
                return Err(Error::Config(format!("key `{key}`: division by zero in `{raw}`")));
            }
            a / b
        }
        None => parse_value(key, raw, "a number")?,
    };
    if !v.is_finite() {
        return Err(Error::Config(format!("key `{key}`: `{raw}` is not finite")));
    }
    Ok(v)
}

fn parse_list<T: FromStr>(key: &str, raw: &str, what: &str) -> Result<Vec<T>> {
    raw.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_value(key, s, what))
        .collect()
}

/// Comma-separated class ids; duplicates are rejected.
pub fn parse_targets(key: &str, raw: &str) -> Result<Vec<u32>> {
    let ids: Vec<u32> = parse_list(key, raw, "a comma-separated list of class ids")?;
    if ids.is_empty() {
        return Err(Error::Config(format!("key `{key}`: no class ids given")));
    }
    let mut seen = std::collections::BTreeSet::new();
    for id in &ids {
        if !seen.insert(*id) {
            return Err(Error::Config(format!("key `{key}`: class {id} listed twice")));
        }
    }
    Ok(ids)
}

/// Parses config text; `base_dir` anchors relative weight paths.
pub fn parse_config_str(text: &str, base_dir: &Path) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    let mut seen: BTreeMap<String, usize> = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let lineno = n + 1;
        let line = match line.find('#') {
            Some(i) => &line[..i],
            None => line,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {lineno}: expected `key = value`, got `{line}`")))?;
        let (key, value) = (key.trim(), value.trim());
        if key.is_empty() {
            return Err(Error::Config(format!("line {lineno}: empty key")));
        }
        if let Some(first) = seen.insert(key.to_string(), lineno) {
            return Err(Error::Config(format!(
                "key `{key}` appears twice (lines {first} and {lineno})"
            )));
        }
        if let Some(rest) = key.strip_prefix("model.") {
            let (id, field) = rest
                .rsplit_once('.')
                .filter(|(id, _)| !id.is_empty())
                .ok_or_else(|| Error::Config(format!("key `{key}`: expected model.<id>.<field>")))?;
            let entry = cfg.models.entry(id.to_string()).or_default();
            match field {
                "weights" => entry.weights = base_dir.join(value),
                "cam_layer" => entry.cam_layer = Some(value.to_string()),
                "input_size" => entry.input_size = Some(parse_value(key, value, "an integer")?),
                "mean" => entry.mean = Some(parse_list(key, value, "a list of numbers")?),
                "std" => entry.std = Some(parse_list(key, value, "a list of numbers")?),
                _ => {
                    return Err(Error::Config(format!(
                        "unknown key `{key}` (model fields: {})",
                        MODEL_FIELDS.join(", ")
                    )))
                }
            }
        } else if TRAIN_KEYS.iter().any(|(k, _)| *k == key) {
            cfg.settings.insert(key.to_string(), value.to_string());
        } else {
            return Err(Error::Config(format!("unknown key `{key}`")));
        }
    }
    for (id, entry) in &cfg.models {
        if entry.weights.as_os_str().is_empty() {
            return Err(Error::Config(format!("model `{id}` has no `model.{id}.weights` entry")));
        }
        if !entry.weights.is_file() {
            return Err(Error::Config(format!(
                "key `model.{id}.weights`: {} does not exist",
                entry.weights.display()
            )));
        }
    }
    // Type-check present settings early so errors surface before any work.
    for (key, raw) in &cfg.settings {
        check_setting(key, raw)?;
    }
    Ok(cfg)
}

fn check_setting(key: &str, raw: &str) -> Result<()> {
    match key {
        "surrogate" => Ok(()),
        "targets" => parse_targets(key, raw).map(|_| ()),
        "learning_rate" | "epsilon" | "mask_prob" => parse_real(key, raw).map(|_| ()),
        "fusion" => FusionMode::from_str(raw).map(|_| ()),
        "seed" => parse_value::<u64>(key, raw, "an integer").map(|_| ()),
        _ => parse_value::<usize>(key, raw, "an integer").map(|_| ()),
    }
}

pub fn parse_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    parse_config_str(&text, base)
}

impl RunConfig {
    fn get(&self, key: &str) -> Option<String> {
        self.settings.get(key).cloned().or_else(|| {
            TRAIN_KEYS
                .iter()
                .find(|(k, _)| *k == key)
                .and_then(|(_, d)| d.map(str::to_string))
        })
    }

    /// Global seed (default 0).
    pub fn seed(&self) -> Result<u64> {
        parse_value("seed", &self.get("seed").unwrap_or_default(), "an integer")
    }

    /// Resolves training settings, filling defaults; lists every missing
    /// required key at once.
    pub fn train_settings(&self) -> Result<TrainSettings> {
        let missing: Vec<&str> = TRAIN_KEYS
            .iter()
            .filter(|(k, d)| d.is_none() && !self.settings.contains_key(*k))
            .map(|(k, _)| *k)
            .collect();
        if !missing.is_empty() {
            return Err(Error::Config(format!("missing required keys: {}", missing.join(", "))));
        }
        let s = |k: &str| self.get(k).expect("key has a value or default");
        let int = |k: &str| parse_value::<usize>(k, &s(k), "an integer");
        let size = int("image_size")?;
        let generator = GeneratorConfig {
            channels: 3,
            height: size,
            width: size,
            base_channels: int("base_channels")?,
            key_dim: int("key_dim")?,
            reduction: int("reduction")?,
            epsilon: parse_real("epsilon", &s("epsilon"))?,
            fusion: s("fusion").parse()?,
        };
        generator.validate()?;
        let out = TrainSettings {
            surrogate: s("surrogate"),
            targets: parse_targets("targets", &s("targets"))?,
            epochs: int("epochs")?,
            learning_rate: parse_real("learning_rate", &s("learning_rate"))?,
            batch_size: int("batch_size")?,
            epsilon: generator.epsilon,
            grid_n: int("grid_n")?,
            mask_prob: parse_real("mask_prob", &s("mask_prob"))?,
            seed: self.seed()?,
            checkpoint_every: int("checkpoint_every")?,
            generator,
        };
        if !(out.learning_rate > 0.0) {
            return Err(Error::Config("key `learning_rate`: must be positive".into()));
        }
        if !(0.0..=1.0).contains(&out.mask_prob) {
            return Err(Error::Config("key `mask_prob`: must lie in [0, 1]".into()));
        }
        if out.batch_size == 0 {
            return Err(Error::Config("key `batch_size`: must be positive".into()));
        }
        if out.grid_n < 2 {
            return Err(Error::Config("key `grid_n`: must be at least 2".into()));
        }
        if !self.models.contains_key(&out.surrogate) {
            return Err(Error::Config(format!(
                "surrogate `{0}` has no registry entry (add model.{0}.weights)",
                out.surrogate
            )));
        }
        Ok(out)
    }

    /// Loads every registered model, applying preprocessing overrides.
    pub fn registry(&self) -> Result<ModelRegistry> {
        let mut reg = ModelRegistry::new();
        for (id, entry) in &self.models {
            reg.insert(load_model(id, entry)?);
        }
        Ok(reg)
    }

    pub fn cam_layer(&self, id: &str) -> Option<&str> {
        self.models.get(id).and_then(|e| e.cam_layer.as_deref())
    }

    /// Canonical `key = value` text: settings then models, sorted, with
    /// defaults filled in. Used for run manifests.
    pub fn canonical_text(&self) -> String {
        let mut out = String::new();
        for (k, _) in TRAIN_KEYS {
            if let Some(v) = self.get(k) {
                out.push_str(&format!("{k} = {v}\n"));
            }
        }
        for (id, e) in &self.models {
            out.push_str(&format!("model.{id}.weights = {}\n", e.weights.display()));
            if let Some(l) = &e.cam_layer {
                out.push_str(&format!("model.{id}.cam_layer = {l}\n"));
            }
        }
        out
    }
}

/// Loads one registry model and applies its overrides.
pub fn load_model(id: &str, entry: &ModelEntry) -> Result<SmallCnn> {
    let model = SmallCnn::load(&entry.weights, Some(id))?;
    let base = model.spec().preprocessing.clone();
    let size = entry.input_size;
    let pre = Preprocessing {
        input_height: size.unwrap_or(base.input_height),
        input_width: size.unwrap_or(base.input_width),
        mean: entry.mean.clone().unwrap_or(base.mean),
        std: entry.std.clone().unwrap_or(base.std),
    };
    pre.validate()?;
    if pre == model.spec().preprocessing {
        Ok(model)
    } else {
        model.with_preprocessing(pre)
    }
}

/// Default budget as written in configs.
pub fn default_epsilon() -> f64 {
    DEFAULT_EPSILON
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<RunConfig> {
        parse_config_str(text, Path::new("."))
    }

    #[test]
    fn empty_train_config_lists_required_keys() {
        let err = parse("").unwrap().train_settings().unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("surrogate") && msg.contains("targets"), "{msg}");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn defaults_are_filled() {
        let dir = tempfile::tempdir().unwrap();
        let w = dir.path().join("m.arc");
        fs::write(&w, b"placeholder").unwrap();
        let cfg = parse_config_str(
            "surrogate = m  # the white-box model\ntargets = 3, 1\nmodel.m.weights = m.arc\n",
            dir.path(),
        )
        .unwrap();
        let s = cfg.train_settings().unwrap();
        assert_eq!(s.epsilon, 16.0 / 255.0);
        assert_eq!((s.epochs, s.batch_size, s.grid_n), (10, 16, 3));
        assert_eq!(s.learning_rate, 2e-4);
        assert_eq!(s.targets, vec![3, 1]);
        assert_eq!(s.generator.height, 224);
    }

    #[test]
    fn rejects_duplicates_unknown_and_bad_types() {
        let dup = parse("epochs = 1\nepochs = 2\n").unwrap_err().to_string();
        assert!(dup.contains("epochs") && dup.contains("twice"), "{dup}");
        let unk = parse("epoch = 1\n").unwrap_err().to_string();
        assert!(unk.contains("`epoch`"), "{unk}");
        let ty = parse("batch_size = sixteen\n").unwrap_err().to_string();
        assert!(ty.contains("batch_size"), "{ty}");
        assert!(parse("model.x.color = red\n").is_err());
        assert!(parse("just words\n").is_err());
        let missing = parse("model.x.weights = /nonexistent/x.arc\n").unwrap_err();
        assert!(matches!(missing, Error::Config(_)));
    }

    #[test]
    fn fractions_and_lists() {
        assert_eq!(parse_real("epsilon", "16/255").unwrap(), 16.0 / 255.0);
        assert!(parse_real("epsilon", "1/0").is_err());
        assert!(parse_targets("targets", "1, 2, 1").is_err());
        assert_eq!(parse_targets("targets", "7").unwrap(), vec![7]);
    }
}
