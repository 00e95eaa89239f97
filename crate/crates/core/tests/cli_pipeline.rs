//! The CLI stages chained through one shared manifest.

use std::fs;
use std::path::{Path, PathBuf};

use advfuse::cli::{run, RunManifest};
use advfuse::eval::AttackReport;

fn cli(args: &[&str]) -> i32 {
    run(std::iter::once("advfuse").chain(args.iter().copied()))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Ws {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Ws {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let code = cli(&[
            "toy", "--out", s(&root.join("ws")), "--per-class", "2", "--test-per-class", "1",
            "--classifier-per-class", "4", "--classifier-epochs", "1", "--epochs", "1",
        ]);
        assert_eq!(code, 0);
        Ws { _dir: dir, root }
    }

    fn p(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }
}

#[test]
fn stages_share_one_manifest_and_feed_each_other() {
    let ws = Ws::new();
    let m = ws.p("manifest.json");
    let (cfg, classes) = (ws.p("ws/toy.cfg"), ws.p("ws/classes.txt"));
    let (train_dir, test_dir) = (ws.p("ws/data/train"), ws.p("ws/data/test"));
    let (lat, ck, adv) = (ws.p("lat"), ws.p("ck"), ws.p("adv"));
    let report = ws.p("ev/report.json");

    assert_eq!(cli(&["gen-latents", "--classes", s(&classes), "--out", s(&lat), "--manifest", s(&m)]), 0);
    assert_eq!(
        cli(&["train", "--config", s(&cfg), "--data", s(&train_dir), "--latents", s(&lat), "--out", s(&ck), "--manifest", s(&m)]),
        0
    );
    let ckpt = ck.join("generator.ckpt");
    assert!(ckpt.is_file());
    assert!(ck.join("losses.csv").is_file());
    assert_eq!(
        cli(&[
            "attack", "--ckpt", s(&ckpt), "--data", s(&test_dir), "--latents", s(&lat), "--targets", "0,3",
            "--out", s(&adv), "--manifest", s(&m),
        ]),
        0
    );
    assert!(adv.join("adv_class0000.arc").is_file());
    assert!(adv.join("adv_class0003.arc").is_file());
    assert!(!adv.join("adv_class0001.arc").exists());
    assert_eq!(
        cli(&[
            "eval", "--advs", s(&adv), "--config", s(&cfg), "--victims", "cnn-a,cnn-b", "--defense", "none",
            "--defense", "bits:4", "--report", s(&report), "--manifest", s(&m),
        ]),
        0
    );

    let manifest = RunManifest::load(&m).unwrap();
    let stages: Vec<&str> = manifest.stages.iter().map(|r| r.stage.as_str()).collect();
    assert_eq!(stages, ["gen-latents", "train", "attack", "eval"]);
    assert!(manifest.stages.iter().all(|r| r.status == "ok" && r.exit_code == 0));
    let hash = manifest.stages[1].checkpoint_hash.clone().expect("train records the checkpoint hash");
    assert_eq!(manifest.stages[2].checkpoint_hash.as_deref(), Some(hash.as_str()));
    assert!(manifest.stages[1].config.is_some());
    for rec in &manifest.stages {
        assert!(!rec.outputs.is_empty(), "{} lists its outputs", rec.stage);
        assert!(rec.outputs.iter().all(|o| o.sha256.len() == 64));
    }

    // 2 victims × 2 defenses × 2 targets
    let rep = AttackReport::load(&report).unwrap();
    assert_eq!(rep.records.len(), 8);
    assert!(rep.records.iter().all(|r| (0.0..=1.0).contains(&r.asr)));
    let csv = fs::read_to_string(report.with_extension("csv")).unwrap();
    assert_eq!(csv.lines().count(), 9);

    let out = ws.p("summary");
    assert_eq!(cli(&["report", "--eval", s(&ws.p("ev")), "--out", s(&out)]), 0);
    assert!(out.join("summary.csv").is_file());
    let pngs = fs::read_dir(&out)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "png"))
        .count();
    assert!(pngs >= 2, "per-victim charts");
}

#[test]
fn exit_codes_classify_failures() {
    let ws = Ws::new();
    let (cfg, train_dir) = (ws.p("ws/toy.cfg"), ws.p("ws/data/train"));

    // no latents at all: data error
    let empty = ws.p("empty");
    fs::create_dir_all(&empty).unwrap();
    assert_eq!(
        cli(&["train", "--config", s(&cfg), "--data", s(&train_dir), "--latents", s(&empty), "--out", s(&ws.p("ck"))]),
        3
    );

    // a misspelt key: configuration error
    let bad = ws.p("ws/bad.cfg");
    fs::write(&bad, fs::read_to_string(&cfg).unwrap().replace("grid_n", "grid_size")).unwrap();
    assert_eq!(
        cli(&["train", "--config", s(&bad), "--data", s(&train_dir), "--latents", s(&empty), "--out", s(&ws.p("ck"))]),
        2
    );

    // unknown defense and missing required flags: usage errors
    assert_eq!(cli(&["eval", "--advs", "x", "--config", s(&cfg), "--victims", "cnn-a", "--defense", "blur:3", "--report", "r.json"]), 2);
    assert_eq!(cli(&["train", "--config", s(&cfg)]), 2);

    // corrupt checkpoint: data error
    let junk = ws.p("junk.ckpt");
    fs::write(&junk, b"not an archive").unwrap();
    assert_eq!(
        cli(&["attack", "--ckpt", s(&junk), "--data", s(&train_dir), "--latents", s(&empty), "--out", s(&ws.p("adv"))]),
        3
    );
}

#[test]
fn gen_latents_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let classes = dir.path().join("classes.txt");
    fs::write(&classes, "0 a photo of a cat\n7 a photo of a dog\n").unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        assert_eq!(cli(&["gen-latents", "--classes", s(&classes), "--seed", "9", "--out", s(out)]), 0);
    }
    let mut names: Vec<_> = fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    let lats: Vec<_> = names.iter().filter(|n| n.to_string_lossy().ends_with(".lat")).collect();
    assert_eq!(lats.len(), 2);
    for n in lats {
        assert_eq!(fs::read(a.join(n)).unwrap(), fs::read(b.join(n)).unwrap());
    }
}
