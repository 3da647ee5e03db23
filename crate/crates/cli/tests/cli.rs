use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use banglagan::image::RgbImage;
use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_banglagan");

const TINY: &str = "\
[damsm]
epochs = 2
[gan]
epochs = 2
batch_size = 8
sample_every = 1
[metrics]
n_samples = 16
splits = 1
classifier_images = 48
classifier_test_images = 24
classifier_epochs = 1
classifier_target = 0
";

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let o = run(args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    o
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Relative path → bytes of every file under `dir` except the manifest.
fn tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        for entry in fs::read_dir(dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else if p.file_name().unwrap() != "manifest.json" {
                out.insert(p.strip_prefix(root).unwrap().display().to_string(), fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

struct Pipeline {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Pipeline {
    fn p(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }
}

/// toygen → train-damsm → train-gan → train-classifier with tiny settings.
fn pipeline() -> &'static Pipeline {
    static P: OnceLock<Pipeline> = OnceLock::new();
    P.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let cfg = root.join("tiny.cfg");
        fs::write(&cfg, TINY).unwrap();
        let (data, dm, gn, clf) = (root.join("data"), root.join("dm"), root.join("gn"), root.join("clf"));
        ok(&["toygen", "--out", s(&data), "--n", "24", "--seed", "7"]);
        ok(&["train-damsm", "--data", s(&data), "--config", s(&cfg), "--out", s(&dm)]);
        ok(&["train-gan", "--data", s(&data), "--damsm", s(&dm), "--config", s(&cfg), "--out", s(&gn)]);
        ok(&["train-classifier", "--config", s(&cfg), "--out", s(&clf)]);
        Pipeline { _dir: dir, root }
    })
}

#[test]
fn toygen_counts_and_manifest() {
    let p = pipeline();
    let data = p.p("data");
    assert_eq!(fs::read_dir(data.join("images")).unwrap().count(), 24);
    let lines: usize = fs::read_dir(data.join("captions"))
        .unwrap()
        .map(|e| fs::read_to_string(e.unwrap().path()).unwrap().lines().count())
        .sum();
    assert_eq!(lines, 240);
    let m: Value = serde_json::from_str(&fs::read_to_string(data.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["command"], "toygen");
    assert_eq!(m["seeds"]["toy"], 7);
    assert_eq!(m["artifacts"].as_array().unwrap().len(), 24 * 2 + 1);
}

#[test]
fn toygen_rejects_zero_images() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["toygen", "--out", s(&dir.path().join("d")), "--n", "0"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage:"));
}

#[test]
fn help_lists_defaults() {
    let o = ok(&["train-gan", "--help"]);
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("gan.epochs = 120") && text.contains("damsm.gamma1 = 4"));
    let o = ok(&["toygen", "--help"]);
    assert!(String::from_utf8_lossy(&o.stdout).contains("[default: 240]"));
}

#[test]
fn damsm_missing_captions_is_io_error() {
    let dir = tempfile::tempdir().unwrap();
    fs::create_dir(dir.path().join("images")).unwrap();
    let o = run(&["train-damsm", "--data", s(dir.path()), "--out", s(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("captions"));
}

#[test]
fn unknown_config_key_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "[damsm]\nepoch = 3\n").unwrap();
    let o = run(&["train-damsm", "--data", "x", "--config", s(&cfg), "--out", "y"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("damsm.epoch"));
}

#[test]
fn damsm_outputs() {
    let p = pipeline();
    let csv = fs::read_to_string(p.p("dm/history.csv")).unwrap();
    assert!(csv.starts_with("epoch,lw1,lw2,ls1,ls2,total,top1_c2i,top1_i2c\n"));
    assert_eq!(csv.lines().count(), 3);
    let m: Value = serde_json::from_str(&fs::read_to_string(p.p("dm/manifest.json")).unwrap()).unwrap();
    assert_eq!(m["config"]["damsm.epochs"], "2");
    assert!(m["checksums"]["history.csv"].as_str().unwrap().len() == 64);
}

#[test]
fn gan_outputs_and_grid_layout() {
    let p = pipeline();
    let csv = fs::read_to_string(p.p("gn/history.csv")).unwrap();
    assert!(csv.lines().all(|l| l.split(',').count() == 10));
    assert_eq!(csv.lines().count(), 3);
    for e in [1, 2] {
        let grid = RgbImage::load(&p.p(&format!("gn/samples/epoch_{e:04}.ppm"))).unwrap();
        // 7 test captions, 32 px tiles, 2 px gutters
        assert_eq!((grid.width, grid.height), (7 * 32 + 6 * 2, 32));
        assert_eq!(grid.get(32, 0), [0, 0, 0]);
    }
}

#[test]
fn gan_rejects_incompatible_encoders() {
    let p = pipeline();
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("d.cfg");
    fs::write(&cfg, "[encoders]\nhidden = 16\n").unwrap();
    let o = run(&["train-gan", "--data", s(&p.p("data")), "--damsm", s(&p.p("dm")), "--config", s(&cfg), "--out", s(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(5));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("D = 32") && err.contains("D = 64"), "{err}");
}

#[test]
fn generate_outputs() {
    let p = pipeline();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("g");
    ok(&["generate", "--ckpt", s(&p.p("gn")), "--caption", "একটি লাল বৃত্ত", "--out", s(&out)]);
    for (stage, size) in [(0, 8), (1, 16), (2, 32)] {
        let img = RgbImage::load(&out.join(format!("sample_000_stage{stage}.ppm"))).unwrap();
        assert_eq!((img.width, img.height), (size, size));
    }
    let lines: Vec<Value> = fs::read_to_string(out.join("attention.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 2);
    assert!(lines.iter().all(|l| l["top"].as_array().unwrap().len() <= 5));

    let one = dir.path().join("one");
    ok(&["generate", "--ckpt", s(&p.p("gn")), "--caption", "লাল", "--n", "2", "--out", s(&one)]);
    for l in fs::read_to_string(one.join("attention.jsonl")).unwrap().lines() {
        let v: Value = serde_json::from_str(l).unwrap();
        let top = v["top"].as_array().unwrap();
        assert_eq!(top.len(), 1);
        assert_eq!(top[0]["score"], 1.0);
        assert_eq!(top[0]["token"], "লাল");
    }
}

#[test]
fn generate_rejects_empty_caption() {
    let p = pipeline();
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["generate", "--ckpt", s(&p.p("gn")), "--caption", " ,।, ", "--out", s(&dir.path().join("g"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn evaluate_identity_and_schema() {
    let p = pipeline();
    let dir = tempfile::tempdir().unwrap();
    let cfg = p.p("tiny.cfg");
    let out = dir.path().join("m.json");
    let (gn, data, clf) = (p.p("gn"), p.p("data"), p.p("clf"));
    let args = ["evaluate", "--ckpt", s(&gn), "--data", s(&data), "--classifier", s(&clf), "--config", s(&cfg)];
    ok(&[&args[..], &["--out", s(&out), "--identity"]].concat());
    let v: Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    assert!(v["fid"].as_f64().unwrap() <= 1e-6);

    let out2 = dir.path().join("gen.json");
    ok(&[&args[..], &["--out", s(&out2)]].concat());
    let v: Value = serde_json::from_str(&fs::read_to_string(&out2).unwrap()).unwrap();
    for key in ["fid", "fid_mean_term", "fid_trace_term", "is_mean", "is_std"] {
        assert!(v[key].is_f64(), "{key}");
    }
    assert_eq!(v["n_samples"], 16);
    assert_eq!(v["splits"], 1);
    assert_eq!(v["classifier_id"], "standin-cnn3-f32");
    assert_eq!(v["seed"], 0);
    assert_eq!(v["manifest"]["command"], "evaluate");
    assert!(v["manifest"]["checksums"]["input_classifier/index.tsv"].is_string());
    let is = v["is_mean"].as_f64().unwrap();
    assert!((1.0..=24.0).contains(&is));
}

#[test]
fn evaluate_rejects_mismatched_classifier() {
    let p = pipeline();
    let dir = tempfile::tempdir().unwrap();
    let clf = dir.path().join("clf");
    fs::create_dir(&clf).unwrap();
    for e in fs::read_dir(p.p("clf")).unwrap() {
        let e = e.unwrap();
        fs::copy(e.path(), clf.join(e.file_name())).unwrap();
    }
    let meta = fs::read_to_string(clf.join("classifier.tsv")).unwrap();
    fs::write(clf.join("classifier.tsv"), meta.replace("image_size\t32", "image_size\t16")).unwrap();
    let o = run(&["evaluate", "--ckpt", s(&p.p("gn")), "--data", s(&p.p("data")), "--classifier", s(&clf), "--out", s(&dir.path().join("m.json"))]);
    assert_eq!(o.status.code(), Some(5));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("16x16") && err.contains("32x32"), "{err}");
}

#[test]
fn repeated_runs_are_byte_identical() {
    let p = pipeline();
    let dir = tempfile::tempdir().unwrap();
    let cfg = p.p("tiny.cfg");
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        ok(&["train-gan", "--data", s(&p.p("data")), "--damsm", s(&p.p("dm")), "--config", s(&cfg), "--out", s(out)]);
    }
    assert_eq!(tree(&a), tree(&b));
    assert_eq!(tree(&a), tree(&p.p("gn")));
}
