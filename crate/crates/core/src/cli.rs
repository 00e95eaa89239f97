//! Command line front end.
//!
//! Every subcommand appends one stage record to a JSON run manifest
//! (`<out>/manifest.json` unless `--manifest` points elsewhere), on failure
//! as well as on success. Reports themselves carry no paths or timestamps so
//! identical runs produce identical bytes; timing lives only in the manifest.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::archive::{file_sha256, write_atomic};
use crate::classifier::{Classifier, FeatureExtractor, SmallCnn};
use crate::config::{load_model, parse_config, parse_targets, RunConfig};
use crate::data::load_dataset;
use crate::defense::DefenseConfig;
use crate::error::{Error, Result};
use crate::eval::{craft_with_deltas, evaluate_batches, AdvBatch, AttackReport};
use crate::latent::{
    export_latent, import_latent, import_raw_f32, make_pseudo_latent, parse_class_list, LatentCache, TargetClass,
};
use crate::metrics::{attention_area_ratio, build_prototype, feature_quality, grad_cam, psnr, ssim};
use crate::plot::{save_bar_chart, BarChart};
use crate::toy::{build_workspace, ToyConfig};
use crate::train::{Checkpoint, Trainer};

/// Class list copied next to the latents so later stages can recover prompts.
pub const CLASS_LIST: &str = "classes.txt";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Parser)]
#[command(name = "advfuse", version, about = "Latent-guided transferable targeted attacks")]
struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write one latent file per target class.
    GenLatents(GenLatentsArgs),
    /// Build the synthetic desk-scale workspace (datasets, classifiers, config).
    Toy(ToyArgs),
    /// Train the perturbation generator.
    Train(TrainArgs),
    /// Craft adversarial examples with a trained generator.
    Attack(AttackArgs),
    /// Score adversarial examples against victims and defenses.
    Eval(EvalArgs),
    /// Perturbation diagnostics: feature quality, attention area, PSNR, SSIM.
    Metrics(MetricsArgs),
    /// Summarize evaluation reports into CSV and charts.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum LatentMode {
    Pseudo,
    Import,
}

#[derive(Debug, Args)]
struct ManifestArg {
    /// Run manifest to append to (default: <out>/manifest.json).
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GenLatentsArgs {
    /// Class list: `<class_id> <prompt>` per line.
    #[arg(long)]
    classes: PathBuf,
    #[arg(long, value_enum, default_value = "pseudo")]
    mode: LatentMode,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Source directory for `--mode import` (`<id>.lat` or raw `<id>.f32`).
    #[arg(long)]
    from: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    manifest: ManifestArg,
}

#[derive(Debug, Args)]
struct ToyArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = ToyConfig::default().per_class)]
    per_class: usize,
    #[arg(long, default_value_t = ToyConfig::default().test_per_class)]
    test_per_class: usize,
    #[arg(long, default_value_t = ToyConfig::default().classifier_per_class)]
    classifier_per_class: usize,
    #[arg(long, default_value_t = ToyConfig::default().classifier_epochs)]
    classifier_epochs: usize,
    #[arg(long, default_value_t = ToyConfig::default().epochs)]
    epochs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    manifest: ManifestArg,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    latents: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Continue from a checkpoint; `epochs` in the config is the new total.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[command(flatten)]
    manifest: ManifestArg,
}

#[derive(Debug, Args)]
struct AttackArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated class ids, or `all` for every trained target.
    #[arg(long, default_value = "all")]
    targets: String,
    #[arg(long)]
    latents: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    manifest: ManifestArg,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    advs: PathBuf,
    /// Run config holding the model registry.
    #[arg(long)]
    config: PathBuf,
    #[arg(long, value_delimiter = ',', required = true)]
    victims: Vec<String>,
    /// Repeatable; `none`, `gaussian:k`, `median:k`, `average:k`, `jpeg:q`, `bits:b`.
    #[arg(long = "defense", value_delimiter = ',', default_value = "none")]
    defenses: Vec<DefenseConfig>,
    /// JSON report path; a CSV twin and per-victim charts go next to it.
    #[arg(long)]
    report: PathBuf,
    #[command(flatten)]
    manifest: ManifestArg,
}

#[derive(Debug, Args)]
struct MetricsArgs {
    #[arg(long)]
    advs: PathBuf,
    /// Clean images the adversarial examples were crafted from.
    #[arg(long)]
    originals: PathBuf,
    #[arg(long)]
    target: u32,
    #[arg(long)]
    extractor: String,
    #[arg(long, default_value_t = 0.5)]
    tau: f64,
    /// Per-image CSV path; a JSON summary and a chart go next to it.
    #[arg(long)]
    report: PathBuf,
    #[arg(long)]
    config: PathBuf,
    /// Labelled real images for the class prototype (default: --originals).
    #[arg(long)]
    class_data: Option<PathBuf>,
    /// Grad-CAM layer (default: registry entry, else the last spatial layer).
    #[arg(long)]
    cam_layer: Option<String>,
    #[command(flatten)]
    manifest: ManifestArg,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// An eval JSON report, or a directory of them.
    #[arg(long)]
    eval: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    manifest: ManifestArg,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputFile {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    pub status: String,
    pub args: Vec<String>,
    /// Canonical config text, when the stage reads a config.
    pub config: Option<String>,
    pub seed: Option<u64>,
    pub checkpoint_hash: Option<String>,
    pub outputs: Vec<OutputFile>,
    pub started_unix_ms: u128,
    pub elapsed_ms: u128,
    pub error: Option<String>,
    pub exit_code: i32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub stages: Vec<StageRecord>,
}

impl Default for RunManifest {
    fn default() -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            stages: Vec::new(),
        }
    }
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }

    /// Existing manifest at `path`, or an empty one.
    pub fn load_or_default(path: &Path) -> Result<Self> {
        if path.exists() {
            Self::load(path)
        } else {
            Ok(Self::default())
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        write_atomic(path, text.as_bytes())
    }
}

/// What a successful stage reports back for the manifest.
#[derive(Default)]
struct Outcome {
    outputs: Vec<PathBuf>,
    config: Option<String>,
    seed: Option<u64>,
    checkpoint_hash: Option<String>,
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
}

/// Parses `args` (including the program name), runs the subcommand and
/// returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    init_logging(cli.verbose);
    let (stage, manifest_path) = stage_info(&cli.command);
    let started = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0);
    let clock = Instant::now();
    let result = dispatch(&cli.command);
    let elapsed_ms = clock.elapsed().as_millis();
    let (mut record, code) = match result {
        Ok(o) => match hash_outputs(&o.outputs) {
            Ok(outputs) => (
                StageRecord {
                    stage: stage.into(),
                    status: "ok".into(),
                    args: Vec::new(),
                    config: o.config,
                    seed: o.seed,
                    checkpoint_hash: o.checkpoint_hash,
                    outputs,
                    started_unix_ms: started,
                    elapsed_ms,
                    error: None,
                    exit_code: 0,
                },
                0,
            ),
            Err(e) => failed(stage, &e, started, elapsed_ms),
        },
        Err(e) => failed(stage, &e, started, elapsed_ms),
    };
    record.args = argv.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect();
    if let Some(err) = &record.error {
        eprintln!("error: {err}");
    }
    let saved = RunManifest::load_or_default(&manifest_path).and_then(|mut m| {
        m.stages.push(record);
        m.save(&manifest_path)
    });
    match saved {
        Err(e) if code == 0 => {
            eprintln!("error: could not write run manifest: {e}");
            e.exit_code()
        }
        Err(e) => {
            log::warn!("could not write run manifest: {e}");
            code
        }
        Ok(()) => code,
    }
}

fn failed(stage: &str, e: &Error, started: u128, elapsed_ms: u128) -> (StageRecord, i32) {
    let code = e.exit_code();
    (
        StageRecord {
            stage: stage.into(),
            status: "failed".into(),
            args: Vec::new(),
            config: None,
            seed: None,
            checkpoint_hash: None,
            outputs: Vec::new(),
            started_unix_ms: started,
            elapsed_ms,
            error: Some(e.to_string()),
            exit_code: code,
        },
        code,
    )
}

fn hash_outputs(paths: &[PathBuf]) -> Result<Vec<OutputFile>> {
    paths
        .iter()
        .map(|p| {
            Ok(OutputFile {
                path: p.display().to_string(),
                sha256: file_sha256(p)?,
            })
        })
        .collect()
}

fn stage_info(cmd: &Command) -> (&'static str, PathBuf) {
    let pick = |m: &ManifestArg, out_dir: &Path| m.manifest.clone().unwrap_or_else(|| out_dir.join(MANIFEST_FILE));
    match cmd {
        Command::GenLatents(a) => ("gen-latents", pick(&a.manifest, &a.out)),
        Command::Toy(a) => ("toy", pick(&a.manifest, &a.out)),
        Command::Train(a) => ("train", pick(&a.manifest, &a.out)),
        Command::Attack(a) => ("attack", pick(&a.manifest, &a.out)),
        Command::Eval(a) => ("eval", pick(&a.manifest, parent_dir(&a.report))),
        Command::Metrics(a) => ("metrics", pick(&a.manifest, parent_dir(&a.report))),
        Command::Report(a) => ("report", pick(&a.manifest, &a.out)),
    }
}

fn parent_dir(p: &Path) -> &Path {
    match p.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    }
}

fn dispatch(cmd: &Command) -> Result<Outcome> {
    match cmd {
        Command::GenLatents(a) => gen_latents(a),
        Command::Toy(a) => toy(a),
        Command::Train(a) => train(a),
        Command::Attack(a) => attack(a),
        Command::Eval(a) => eval(a),
        Command::Metrics(a) => metrics(a),
        Command::Report(a) => report(a),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn read_text(path: &Path) -> Result<String> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn gen_latents(a: &GenLatentsArgs) -> Result<Outcome> {
    let classes = parse_class_list(&read_text(&a.classes)?)?;
    if classes.is_empty() {
        return Err(Error::Config(format!("{} lists no classes", a.classes.display())));
    }
    let mut cache = LatentCache::new();
    match a.mode {
        LatentMode::Pseudo => {
            for c in &classes {
                cache.insert(make_pseudo_latent(c, a.seed));
            }
        }
        LatentMode::Import => {
            let from = a
                .from
                .as_deref()
                .ok_or_else(|| Error::Config("--mode import requires --from <dir>".into()))?;
            for c in &classes {
                if c.prompt.is_empty() {
                    return Err(Error::Config(format!("class {} has no prompt", c.class_id)));
                }
                let lat = LatentCache::path_for(from, c.class_id);
                let raw = from.join(format!("{}.f32", c.class_id));
                let latent = if lat.exists() {
                    import_latent(&lat, c.class_id)?
                } else if raw.exists() {
                    import_raw_f32(&raw, c.class_id)?
                } else {
                    return Err(Error::MissingLatent(c.class_id));
                };
                cache.insert(latent);
            }
        }
    }
    create_dir(&a.out)?;
    let mut outputs = Vec::new();
    for c in &classes {
        let p = LatentCache::path_for(&a.out, c.class_id);
        export_latent(cache.get(c.class_id)?, &p)?;
        outputs.push(p);
    }
    let list = a.out.join(CLASS_LIST);
    write_atomic(&list, crate::toy::class_list_text(&classes).as_bytes())?;
    outputs.push(list);
    Ok(Outcome {
        outputs,
        seed: Some(a.seed),
        ..Default::default()
    })
}

fn toy(a: &ToyArgs) -> Result<Outcome> {
    let cfg = ToyConfig {
        per_class: a.per_class,
        test_per_class: a.test_per_class,
        classifier_per_class: a.classifier_per_class,
        classifier_epochs: a.classifier_epochs,
        epochs: a.epochs,
        seed: a.seed,
        ..Default::default()
    };
    let ws = build_workspace(&a.out, &cfg)?;
    println!(
        "clean accuracy: surrogate {:.4}, victim {:.4}",
        ws.accuracy.0, ws.accuracy.1
    );
    let acc = a.out.join("clean_accuracy.csv");
    write_atomic(
        &acc,
        format!(
            "model,accuracy\n{},{}\n{},{}\n",
            crate::toy::SURROGATE_ID,
            ws.accuracy.0,
            crate::toy::VICTIM_ID,
            ws.accuracy.1
        )
        .as_bytes(),
    )?;
    let mut outputs = vec![ws.config.clone(), ws.classes.clone(), acc];
    outputs.extend(ws.models.iter().cloned());
    Ok(Outcome {
        outputs,
        seed: Some(a.seed),
        ..Default::default()
    })
}

/// Prompts keyed by class id, from `<latents>/classes.txt` when present.
fn class_prompts(latents: &Path) -> Result<Vec<TargetClass>> {
    let p = latents.join(CLASS_LIST);
    if p.exists() {
        parse_class_list(&read_text(&p)?)
    } else {
        Ok(Vec::new())
    }
}

fn resolve_classes(ids: &[u32], known: &[TargetClass]) -> Vec<TargetClass> {
    ids.iter()
        .map(|&id| {
            known
                .iter()
                .find(|c| c.class_id == id)
                .cloned()
                .unwrap_or_else(|| TargetClass::new(id, ""))
        })
        .collect()
}

fn registry_model(cfg: &RunConfig, id: &str) -> Result<SmallCnn> {
    let entry = cfg
        .models
        .get(id)
        .ok_or_else(|| Error::Config(format!("model `{id}` has no registry entry")))?;
    load_model(id, entry)
}

fn train(a: &TrainArgs) -> Result<Outcome> {
    let rc = parse_config(&a.config)?;
    let s = rc.train_settings()?;
    let cache = LatentCache::load_dir(&a.latents)?;
    for &id in &s.targets {
        cache.get(id)?;
    }
    let surrogate = registry_model(&rc, &s.surrogate)?;
    let data = load_dataset(&a.data, Some((s.generator.height, s.generator.width)))?;
    let cfg = s.train_config(resolve_classes(&s.targets, &class_prompts(&a.latents)?));
    let mut trainer = match &a.resume {
        Some(p) => {
            let ckpt = Checkpoint::load(p)?;
            if ckpt.train.target_classes.iter().map(|c| c.class_id).ne(cfg.target_classes.iter().map(|c| c.class_id))
                || ckpt.train.surrogate_id != cfg.surrogate_id
            {
                return Err(Error::Config(format!(
                    "checkpoint {} was trained with different targets or surrogate",
                    p.display()
                )));
            }
            Trainer::resume(&ckpt, cfg.epochs, &surrogate, &cache)?
        }
        None => Trainer::new(cfg, s.generator.clone(), &surrogate, &cache)?,
    };
    create_dir(&a.out)?;
    let ckpt = trainer.run(&data.images, Some(&a.out))?;
    let losses = a.out.join("losses.csv");
    let mut text = String::from("step,loss\n");
    for (i, l) in ckpt.state.losses.iter().enumerate() {
        text.push_str(&format!("{},{}\n", i + 1, l));
    }
    write_atomic(&losses, text.as_bytes())?;
    let mut outputs: Vec<PathBuf> = fs::read_dir(&a.out)
        .map_err(|e| Error::io(&a.out, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "ckpt"))
        .collect();
    outputs.sort();
    outputs.push(losses);
    Ok(Outcome {
        outputs,
        config: Some(rc.canonical_text()),
        seed: Some(s.seed),
        checkpoint_hash: Some(ckpt.hash()?),
    })
}

fn attack(a: &AttackArgs) -> Result<Outcome> {
    let ckpt = Checkpoint::load(&a.ckpt)?;
    let hash = ckpt.hash()?;
    let generator = ckpt.generator()?;
    let trained: Vec<u32> = ckpt.train.target_classes.iter().map(|c| c.class_id).collect();
    let ids = if a.targets.trim() == "all" {
        trained.clone()
    } else {
        parse_targets("--targets", &a.targets)?
    };
    if let Some(id) = ids.iter().find(|id| !trained.contains(id)) {
        log::warn!("class {id} was not a training target of this checkpoint");
    }
    let mut known = ckpt.train.target_classes.clone();
    known.extend(class_prompts(&a.latents)?);
    let targets = resolve_classes(&ids, &known);
    let cache = LatentCache::load_dir(&a.latents)?;
    let cfg = generator.config();
    let data = load_dataset(&a.data, Some((cfg.height, cfg.width)))?;
    create_dir(&a.out)?;
    let mut outputs = Vec::new();
    for t in &targets {
        let (advs, deltas) = craft_with_deltas(&data.images, &generator, t, cache.get(t.class_id)?)?;
        let batch = AdvBatch {
            target: t.clone(),
            epsilon: cfg.epsilon,
            surrogate_id: ckpt.train.surrogate_id.clone(),
            checkpoint_hash: hash.clone(),
            seed: ckpt.train.seed,
            files: data.files.clone(),
            advs,
            deltas,
        };
        outputs.push(batch.save(&a.out)?);
    }
    Ok(Outcome {
        outputs,
        seed: Some(ckpt.train.seed),
        checkpoint_hash: Some(hash),
        ..Default::default()
    })
}

/// `report.json` → `report.csv`, `report_<suffix>.png`, … beside it.
fn sibling(path: &Path, suffix: &str, ext: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "report".into());
    let name = if suffix.is_empty() {
        format!("{stem}.{ext}")
    } else {
        format!("{stem}_{suffix}.{ext}")
    };
    parent_dir(path).join(name)
}

fn victim_charts(report: &AttackReport, path_for: impl Fn(&str) -> PathBuf) -> Result<Vec<PathBuf>> {
    let mut victims: Vec<String> = report.records.iter().map(|r| r.victim_id.clone()).collect();
    victims.dedup();
    let mut outputs = Vec::new();
    for v in victims {
        let rows: Vec<_> = report.mean_by_victim().into_iter().filter(|(id, _, _)| *id == v).collect();
        let chart = BarChart {
            title: format!("mean ASR {v}"),
            labels: rows.iter().map(|(_, d, _)| d.to_string()).collect(),
            values: rows.iter().map(|(_, _, a)| *a).collect(),
            y_max: 1.0,
        };
        let p = path_for(&v);
        save_bar_chart(&p, &chart)?;
        outputs.push(p);
    }
    Ok(outputs)
}

fn eval(a: &EvalArgs) -> Result<Outcome> {
    let rc = parse_config(&a.config)?;
    let batches = AdvBatch::load_dir(&a.advs)?;
    let models = a.victims.iter().map(|id| registry_model(&rc, id)).collect::<Result<Vec<_>>>()?;
    let victims: Vec<&dyn Classifier> = models.iter().map(|m| m as &dyn Classifier).collect();
    for d in &a.defenses {
        d.validate()?;
    }
    let report = evaluate_batches(&batches, &victims, &a.defenses)?;
    create_dir(parent_dir(&a.report))?;
    let (json, csv) = report.save(&a.report)?;
    let mut outputs = vec![json, csv];
    outputs.extend(victim_charts(&report, |v| sibling(&a.report, &format!("asr_{v}"), "png"))?);
    for (v, d, asr) in report.mean_by_victim() {
        println!("{v:>12} {d:>12} mean ASR {asr:.4}");
    }
    Ok(Outcome {
        outputs,
        config: Some(rc.canonical_text()),
        seed: Some(report.meta.seed),
        checkpoint_hash: Some(report.meta.checkpoint_hash.clone()),
    })
}

#[derive(Debug, Serialize)]
struct MetricsRow {
    file: String,
    psnr: f64,
    ssim: f64,
    feature_quality: f64,
    area_ratio: f64,
    clean_area_ratio: f64,
}

#[derive(Debug, Serialize)]
struct MetricsSummary {
    target_class: u32,
    extractor_id: String,
    cam_layer: String,
    tau: f64,
    n_images: usize,
    prototype_images: usize,
    /// Mean over finite values; `None` when every pair is identical.
    mean_psnr: Option<f64>,
    mean_ssim: f64,
    mean_feature_quality: f64,
    mean_area_ratio: f64,
    mean_clean_area_ratio: f64,
    checkpoint_hash: String,
}

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

fn metrics(a: &MetricsArgs) -> Result<Outcome> {
    if !(0.0..=1.0).contains(&a.tau) {
        return Err(Error::Config(format!("--tau must lie in [0, 1], got {}", a.tau)));
    }
    let rc = parse_config(&a.config)?;
    let model = registry_model(&rc, &a.extractor)?;
    let layer = match a.cam_layer.as_deref().or(rc.cam_layer(&a.extractor)) {
        Some(l) => l.to_string(),
        None => model
            .default_cam_layer()
            .ok_or_else(|| Error::Config(format!("model {} has no spatial layer", a.extractor)))?,
    };
    let batch = AdvBatch::load(&a.advs.join(AdvBatch::file_name(a.target)))?;
    let (_, h, w) = batch.advs.first().map(|x| x.shape()).ok_or_else(|| Error::EmptyInput("adversarial batch".into()))?;
    let originals = load_dataset(&a.originals, Some((h, w)))?;
    let class_dir = a.class_data.as_deref().unwrap_or(&a.originals);
    let class_set = if class_dir == a.originals {
        originals.clone()
    } else {
        load_dataset(class_dir, None)?
    };
    let labels = class_set.labels_or_err()?;
    let idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == a.target).collect();
    let proto = build_prototype(&class_set.subset(&idx).images, a.target, &model as &dyn FeatureExtractor)?;

    let mut rows = Vec::with_capacity(batch.advs.len());
    for ((file, adv), delta) in batch.files.iter().zip(&batch.advs).zip(&batch.deltas) {
        let i = originals
            .files
            .iter()
            .position(|f| f == file)
            .ok_or_else(|| Error::MissingFile(a.originals.join(file)))?;
        let clean = &originals.images[i];
        rows.push(MetricsRow {
            file: file.clone(),
            psnr: psnr(clean, adv)?,
            ssim: ssim(clean, adv)?,
            feature_quality: feature_quality(delta, &proto, &model)?,
            area_ratio: attention_area_ratio(&grad_cam(&model, adv, a.target, &layer)?, a.tau),
            clean_area_ratio: attention_area_ratio(&grad_cam(&model, clean, a.target, &layer)?, a.tau),
        });
    }
    let summary = MetricsSummary {
        target_class: a.target,
        extractor_id: a.extractor.clone(),
        cam_layer: layer,
        tau: a.tau,
        n_images: rows.len(),
        prototype_images: proto.n_source_images,
        mean_psnr: mean(rows.iter().map(|r| r.psnr).filter(|p| p.is_finite())),
        mean_ssim: mean(rows.iter().map(|r| r.ssim)).unwrap_or(f64::NAN),
        mean_feature_quality: mean(rows.iter().map(|r| r.feature_quality)).unwrap_or(f64::NAN),
        mean_area_ratio: mean(rows.iter().map(|r| r.area_ratio)).unwrap_or(f64::NAN),
        mean_clean_area_ratio: mean(rows.iter().map(|r| r.clean_area_ratio)).unwrap_or(f64::NAN),
        checkpoint_hash: batch.checkpoint_hash.clone(),
    };

    create_dir(parent_dir(&a.report))?;
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in &rows {
        w.serialize(r).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::InvalidArgument(e.to_string()))?;
    write_atomic(&a.report, &bytes)?;
    let json = sibling(&a.report, "", "json");
    let text = serde_json::to_string_pretty(&summary).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    write_atomic(&json, text.as_bytes())?;
    let chart_path = sibling(&a.report, "chart", "png");
    save_bar_chart(
        &chart_path,
        &BarChart {
            title: format!("class {} {}", a.target, a.extractor),
            labels: vec!["fq".into(), "area".into(), "clean".into(), "ssim".into()],
            values: vec![
                summary.mean_feature_quality.max(0.0),
                summary.mean_area_ratio,
                summary.mean_clean_area_ratio,
                summary.mean_ssim.max(0.0),
            ],
            y_max: 1.0,
        },
    )?;
    println!(
        "feature quality {:.4}, area ratio {:.4} (clean {:.4}), ssim {:.4}",
        summary.mean_feature_quality, summary.mean_area_ratio, summary.mean_clean_area_ratio, summary.mean_ssim
    );
    Ok(Outcome {
        outputs: vec![a.report.clone(), json, chart_path],
        config: Some(rc.canonical_text()),
        seed: Some(batch.seed),
        checkpoint_hash: Some(batch.checkpoint_hash),
    })
}

fn report(a: &ReportArgs) -> Result<Outcome> {
    let paths = if a.eval.is_dir() {
        let mut v: Vec<PathBuf> = fs::read_dir(&a.eval)
            .map_err(|e| Error::io(&a.eval, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json") && p.file_name() != Some(MANIFEST_FILE.as_ref()))
            .collect();
        v.sort();
        v
    } else if a.eval.exists() {
        vec![a.eval.clone()]
    } else {
        return Err(Error::MissingFile(a.eval.clone()));
    };
    if paths.is_empty() {
        return Err(Error::EmptyInput(format!("no eval reports in {}", a.eval.display())));
    }
    let mut merged: Option<AttackReport> = None;
    for p in &paths {
        let r = AttackReport::load(p)?;
        match &mut merged {
            None => merged = Some(r),
            Some(m) => m.records.extend(r.records),
        }
    }
    let merged = merged.expect("at least one report");
    create_dir(&a.out)?;
    let summary = a.out.join("summary.csv");
    let mut text = String::from("victim_id,defense,white_box,mean_asr\n");
    for (v, d, asr) in merged.mean_by_victim() {
        let wb = merged.records.iter().any(|r| r.victim_id == v && r.white_box);
        text.push_str(&format!("{v},{d},{wb},{asr}\n"));
    }
    write_atomic(&summary, text.as_bytes())?;
    let mut outputs = vec![summary];
    outputs.extend(victim_charts(&merged, |v| a.out.join(format!("asr_{v}.png")))?);

    // per-target chart of the undefended transfer rates, one per victim
    let mut victims: Vec<String> = merged.records.iter().map(|r| r.victim_id.clone()).collect();
    victims.dedup();
    for v in victims {
        let rows: Vec<_> = merged
            .records
            .iter()
            .filter(|r| r.victim_id == v && r.defense == DefenseConfig::None)
            .collect();
        if rows.is_empty() {
            continue;
        }
        let p = a.out.join(format!("targets_{v}.png"));
        save_bar_chart(
            &p,
            &BarChart {
                title: format!("ASR by target {v}"),
                labels: rows.iter().map(|r| r.target_class.to_string()).collect(),
                values: rows.iter().map(|r| r.asr).collect(),
                y_max: 1.0,
            },
        )?;
        outputs.push(p);
    }
    Ok(Outcome {
        outputs,
        seed: Some(merged.meta.seed),
        checkpoint_hash: Some(merged.meta.checkpoint_hash.clone()),
        ..Default::default()
    })
}
