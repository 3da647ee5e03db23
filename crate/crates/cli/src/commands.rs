use std::fs;
use std::path::{Path, PathBuf};

use banglagan::damsm::{self, train_damsm, DamsmModel};
use banglagan::encoders::EncoderConfig;
use banglagan::gan::{self, generate_eval, stage_size, train_gan, GanModel, STAGES};
use banglagan::image::RgbImage;
use banglagan::metrics::{evaluate_images, evaluate_model, train_standin_classifier, StandInClassifier};
use banglagan::numerics::{RngStream, Tensor};
use banglagan::textdata::toy::{gen_toy_dataset, write_toy_dataset, ToySample, ToySpec};
use banglagan::textdata::{
    corpus_tokens, encode_caption, load_raw_dataset, prepare_examples, split_dataset, tokenize, DatasetSplit, Example,
    TokenizedCaption, Vocabulary,
};
use banglagan::Error;

use crate::config::Settings;
use crate::manifest::{now_unix, RunManifest, MANIFEST_FILE};
use crate::report::{attention_lines, metrics_json, TOP_K};
use crate::{CliError, CliResult, Command, ConfigArg};

const VOCAB_FILE: &str = "vocab.txt";
const TEXTDATA_FILE: &str = "textdata.tsv";
const GRID_GUTTER: usize = 2;
const GRID_CAPTIONS: usize = 8;

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    Error::io(path, e).into()
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> CliResult<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| io_err(path, e))
}

fn create_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path).map_err(|e| io_err(path, e))
}

fn load_settings(arg: &ConfigArg) -> CliResult<Settings> {
    let mut s = Settings::default();
    if let Some(path) = &arg.config {
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        s.apply_text(&text)
            .map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
    }
    Ok(s)
}

fn override_key(s: &mut Settings, key: &str, value: Option<impl ToString>) -> CliResult<()> {
    if let Some(v) = value {
        let (sec, k) = key.split_once('.').expect("dotted key");
        s.set(sec, k, &v.to_string()).map_err(CliError::usage)?;
    }
    Ok(())
}

fn finish(out: &Path, mut manifest: RunManifest, settings: Option<&Settings>) -> CliResult<()> {
    if let Some(s) = settings {
        manifest.config.extend(s.entries());
    }
    manifest.checksum_dir(out).map_err(|e| io_err(out, e))?;
    manifest.finished_unix = now_unix();
    write(&out.join(MANIFEST_FILE), manifest.to_json())
}

/// Encoders plus the vocabulary and caption length they were trained with.
pub struct TextBundle {
    pub damsm: DamsmModel,
    pub vocab: Vocabulary,
    pub max_len: usize,
}

fn save_text_bundle(dir: &Path, b: &TextBundle) -> CliResult<()> {
    create_dir(dir)?;
    b.damsm.save(dir)?;
    write(&dir.join(VOCAB_FILE), b.vocab.to_text())?;
    write(
        &dir.join(TEXTDATA_FILE),
        format!("max_len\t{}\nmin_freq\t{}\n", b.max_len, b.vocab.min_freq()),
    )
}

pub fn load_text_bundle(dir: &Path) -> CliResult<TextBundle> {
    let damsm = DamsmModel::load(dir)?;
    let p = dir.join(TEXTDATA_FILE);
    let meta = fs::read_to_string(&p).map_err(|e| io_err(&p, e))?;
    let field = |key: &str| -> CliResult<usize> {
        meta.lines()
            .filter_map(|l| l.split_once('\t'))
            .find(|(k, _)| *k == key)
            .and_then(|(_, v)| v.trim().parse().ok())
            .ok_or_else(|| {
                Error::Format {
                    path: p.clone(),
                    msg: format!("missing or malformed {key}"),
                }
                .into()
            })
    };
    let vp = dir.join(VOCAB_FILE);
    let vocab = Vocabulary::from_text(&fs::read_to_string(&vp).map_err(|e| io_err(&vp, e))?, field("min_freq")?)?;
    if vocab.len() != damsm.encoder.vocab_size {
        return Err(Error::Incompatible(format!(
            "vocabulary has {} tokens, text encoder expects {}",
            vocab.len(),
            damsm.encoder.vocab_size
        ))
        .into());
    }
    Ok(TextBundle {
        damsm,
        vocab,
        max_len: field("max_len")?,
    })
}

fn load_split(data: &Path, s: &Settings, vocab: &Vocabulary, max_len: usize) -> CliResult<DatasetSplit<Example>> {
    let raw = load_raw_dataset(data, s.captions_per_image)?;
    let examples = prepare_examples(&raw, vocab, max_len)?;
    Ok(split_dataset(&examples, s.train_fraction, s.split_seed)?)
}

fn load_gan_ckpt(ckpt: &Path) -> CliResult<(GanModel, TextBundle)> {
    let bundle = load_text_bundle(&ckpt.join("damsm"))?;
    let model = GanModel::load(&ckpt.join("generator"))?;
    model.check_compatible(&bundle.damsm)?;
    Ok((model, bundle))
}

pub fn dispatch(cmd: Command, args: &[String]) -> CliResult<()> {
    match cmd {
        Command::Toygen {
            out,
            n,
            size,
            seed,
            captions,
        } => toygen(&out, n as usize, size as usize, seed, captions as usize, args),
        Command::TrainDamsm {
            data,
            out,
            config,
            epochs,
            seed,
        } => {
            let mut s = load_settings(&config)?;
            override_key(&mut s, "damsm.epochs", epochs)?;
            override_key(&mut s, "damsm.seed", seed)?;
            s.validate().map_err(CliError::usage)?;
            train_damsm_cmd(&data, &out, &s, config.config.as_deref(), args)
        }
        Command::TrainGan {
            data,
            damsm,
            out,
            config,
            epochs,
            seed,
        } => {
            let mut s = load_settings(&config)?;
            override_key(&mut s, "gan.epochs", epochs)?;
            override_key(&mut s, "gan.seed", seed)?;
            s.validate().map_err(CliError::usage)?;
            train_gan_cmd(&data, &damsm, &out, &s, config.config.as_deref(), args)
        }
        Command::TrainClassifier { out, config, seed } => {
            let mut s = load_settings(&config)?;
            override_key(&mut s, "metrics.classifier_seed", seed)?;
            s.validate().map_err(CliError::usage)?;
            train_classifier_cmd(&out, &s, config.config.as_deref(), args)
        }
        Command::Generate {
            ckpt,
            caption,
            n,
            seed,
            out,
        } => generate_cmd(&ckpt, &caption, n as usize, seed, &out, args),
        Command::Evaluate {
            ckpt,
            data,
            classifier,
            out,
            config,
            n_samples,
            seed,
            identity,
        } => {
            let mut s = load_settings(&config)?;
            override_key(&mut s, "metrics.n_samples", n_samples)?;
            override_key(&mut s, "metrics.seed", seed)?;
            s.validate().map_err(CliError::usage)?;
            let paths = EvalPaths {
                ckpt,
                data,
                classifier,
                out,
                config: config.config,
            };
            evaluate_cmd(&paths, &s, identity, args)
        }
    }
}

fn toygen(out: &Path, n: usize, size: usize, seed: u64, captions: usize, args: &[String]) -> CliResult<()> {
    let spec = ToySpec {
        n_images: n,
        image_size: size,
        captions_per_image: captions,
        seed,
        ..ToySpec::default()
    };
    create_dir(out)?;
    write_toy_dataset(out, &spec)?;
    let mut m = RunManifest::new("toygen", args, None);
    for (k, v) in [("n", n), ("size", size), ("captions", captions)] {
        m.config.insert(format!("toygen.{k}"), v.to_string());
    }
    m.seeds.insert("toy".into(), seed);
    eprintln!("wrote {n} images to {}", out.display());
    finish(out, m, None)
}

fn train_damsm_cmd(data: &Path, out: &Path, s: &Settings, config: Option<&Path>, args: &[String]) -> CliResult<()> {
    let raw = load_raw_dataset(data, s.captions_per_image)?;
    let vocab = Vocabulary::build(&corpus_tokens(&raw)?, s.min_freq);
    let examples = prepare_examples(&raw, &vocab, s.max_len)?;
    let split = split_dataset(&examples, s.train_fraction, s.split_seed)?;
    let encoder = EncoderConfig {
        vocab_size: vocab.len(),
        embed_dim: s.embed_dim,
        hidden: s.hidden,
        image_size: examples[0].image.width,
        dropout: s.dropout,
    };
    eprintln!(
        "damsm: {} train / {} test images, vocabulary {}, D = {}",
        split.train.len(),
        split.test.len(),
        vocab.len(),
        encoder.d()
    );
    let (damsm, history) = train_damsm(&split, encoder, &s.damsm, s.damsm_seed, |r| {
        eprintln!(
            "epoch {:>3}  total {:.4}  top1 c2i {:.3}  i2c {:.3}",
            r.epoch, r.loss.total, r.top1_c2i, r.top1_i2c
        )
    })?;
    save_text_bundle(
        out,
        &TextBundle {
            damsm,
            vocab,
            max_len: s.max_len,
        },
    )?;
    write(&out.join("history.csv"), damsm::history_csv(&history))?;
    let mut m = RunManifest::new("train-damsm", args, config);
    m.seeds.insert("damsm".into(), s.damsm_seed);
    m.seeds.insert("split".into(), s.split_seed);
    finish(out, m, Some(s))
}

/// Fixed captions and noise for the periodic sample grids.
fn sample_inputs<'a>(split: &'a DatasetSplit<Example>, z_dim: usize, seed: u64) -> CliResult<(Vec<&'a TokenizedCaption>, Tensor)> {
    let pool = if split.test.is_empty() { &split.train } else { &split.test };
    let caps: Vec<&TokenizedCaption> = pool.iter().take(GRID_CAPTIONS).map(|e| &e.record.captions[0]).collect();
    let noise = Tensor::new(&[caps.len(), z_dim], RngStream::new(seed, "samples").normals(caps.len() * z_dim))?;
    Ok((caps, noise))
}

fn train_gan_cmd(data: &Path, damsm_dir: &Path, out: &Path, s: &Settings, config: Option<&Path>, args: &[String]) -> CliResult<()> {
    let bundle = load_text_bundle(damsm_dir)?;
    let d = bundle.damsm.d();
    if 2 * s.hidden != d {
        return Err(Error::Incompatible(format!(
            "config encoders give D = {}, DAMSM checkpoint has D = {d}",
            2 * s.hidden
        ))
        .into());
    }
    let split = load_split(data, s, &bundle.vocab, bundle.max_len)?;
    let (caps, noise) = sample_inputs(&split, s.gan.z_dim, s.gan.seed)?;
    let samples_dir = out.join("samples");
    create_dir(&samples_dir)?;
    eprintln!("gan: {} train images, D = {d}", split.train.len());
    let (model, history) = train_gan(&split, &bundle.damsm, &s.damsm, &s.gan, |row, model| {
        eprintln!(
            "epoch {:>3}  d {:.3}/{:.3}/{:.3}  g {:.3}/{:.3}/{:.3}  damsm {:.4}  kl {:.4}",
            row.epoch, row.d[0], row.d[1], row.d[2], row.lg[0], row.lg[1], row.lg[2], row.damsm, row.kl
        );
        if row.epoch % s.sample_every == 0 || row.epoch == s.gan.epochs {
            let [_, _, x2] = generate_eval(model, &bundle.damsm, &caps, &noise)?.images;
            let grid = RgbImage::tiles(&x2, x2.len(), GRID_GUTTER);
            grid.save(&samples_dir.join(format!("epoch_{:04}.ppm", row.epoch)))?;
        }
        Ok(())
    })?;
    model.save(&out.join("generator"))?;
    save_text_bundle(&out.join("damsm"), &bundle)?;
    write(&out.join("history.csv"), gan::history_csv(&history))?;
    let mut m = RunManifest::new("train-gan", args, config);
    m.seeds.insert("gan".into(), s.gan.seed);
    m.seeds.insert("split".into(), s.split_seed);
    m.seeds.insert("samples".into(), s.gan.seed);
    m.checksum_inputs(damsm_dir, "input_damsm").map_err(|e| io_err(damsm_dir, e))?;
    finish(out, m, Some(s))
}

fn labeled(v: &[ToySample]) -> Vec<(&RgbImage, usize)> {
    v.iter().map(|t| (&t.image, t.record.class_label)).collect()
}

fn train_classifier_cmd(out: &Path, s: &Settings, config: Option<&Path>, args: &[String]) -> CliResult<()> {
    let size = stage_size(STAGES - 1);
    let spec = |n, seed| ToySpec {
        n_images: n,
        image_size: size,
        seed,
        ..ToySpec::default()
    };
    let train = gen_toy_dataset(&spec(s.classifier_images, s.classifier_data_seed))?;
    let test = gen_toy_dataset(&spec(s.classifier_test_images, s.classifier_data_seed + 1))?;
    let classes = ToySpec::default().num_classes();
    let (clf, report) = train_standin_classifier(&labeled(&train), &labeled(&test), classes, &s.classifier_config())?;
    eprintln!(
        "classifier: held-out accuracy {:.4} after {} epochs",
        report.final_accuracy(),
        report.accuracy.len()
    );
    create_dir(out)?;
    clf.save(out)?;
    let mut csv = String::from("epoch,accuracy\n");
    for (i, a) in report.accuracy.iter().enumerate() {
        csv.push_str(&format!("{},{a:.6}\n", i + 1));
    }
    write(&out.join("accuracy.csv"), csv)?;
    let mut m = RunManifest::new("train-classifier", args, config);
    m.seeds.insert("classifier".into(), s.classifier.seed);
    m.seeds.insert("classifier_data".into(), s.classifier_data_seed);
    finish(out, m, Some(s))
}

fn generate_cmd(ckpt: &Path, caption: &str, n: usize, seed: u64, out: &Path, args: &[String]) -> CliResult<()> {
    let (model, bundle) = load_gan_ckpt(ckpt)?;
    let tokens = tokenize(caption);
    if tokens.is_empty() {
        return Err(CliError::usage(format!("caption {caption:?} has no tokens after tokenization")));
    }
    let cap = encode_caption(&bundle.vocab, &tokens, bundle.max_len)?;
    let caps = vec![&cap; n];
    let z = model.cfg.z_dim;
    let noise = Tensor::new(&[n, z], RngStream::new(seed, "generate").normals(n * z))?;
    let generated = generate_eval(&model, &bundle.damsm, &caps, &noise)?;
    create_dir(out)?;
    for (stage, imgs) in generated.images.iter().enumerate() {
        for (b, img) in imgs.iter().enumerate() {
            img.save(&out.join(format!("sample_{b:03}_stage{stage}.ppm")))?;
        }
    }
    let kept: Vec<String> = tokens.iter().take(cap.num_words()).cloned().collect();
    let words = vec![kept; n];
    let mut lines = Vec::new();
    for (i, alpha) in generated.attn.iter().enumerate() {
        let stage = i + 1;
        write(&out.join(format!("attn_stage{stage}.t2it")), alpha.to_bytes())?;
        lines.extend(attention_lines(stage, alpha, &words, &generated.text.mask, TOP_K));
    }
    write(&out.join("attention.jsonl"), lines.join("\n") + "\n")?;
    let mut m = RunManifest::new("generate", args, None);
    m.config.insert("generate.caption".into(), caption.to_string());
    m.config.insert("generate.n".into(), n.to_string());
    m.seeds.insert("generate".into(), seed);
    m.checksum_inputs(ckpt, "input_ckpt").map_err(|e| io_err(ckpt, e))?;
    finish(out, m, None)
}

struct EvalPaths {
    ckpt: PathBuf,
    data: PathBuf,
    classifier: PathBuf,
    out: PathBuf,
    config: Option<PathBuf>,
}

fn evaluate_cmd(p: &EvalPaths, s: &Settings, identity: bool, args: &[String]) -> CliResult<()> {
    let (model, bundle) = load_gan_ckpt(&p.ckpt)?;
    let clf = StandInClassifier::load(&p.classifier)?;
    let final_size = stage_size(STAGES - 1);
    if clf.image_size != final_size {
        return Err(Error::Incompatible(format!(
            "classifier expects {0}x{0} images, generator produces {1}x{1}",
            clf.image_size, final_size
        ))
        .into());
    }
    let split = load_split(&p.data, s, &bundle.vocab, bundle.max_len)?;
    let eval = if identity {
        let real: Vec<&RgbImage> = split.test.iter().map(|e| &e.image).collect();
        evaluate_images(&clf, &real, &real, s.eval.splits)?
    } else {
        evaluate_model(&model, &bundle.damsm, &clf, &split.test, &s.eval)?
    };
    for w in &eval.warnings {
        eprintln!("warning: {w}");
    }
    eprintln!(
        "fid {:.4}  is {:.4} ± {:.4}  ({} samples)",
        eval.fid.fid, eval.is.mean, eval.is.std, eval.n_samples
    );
    let mut m = RunManifest::new("evaluate", args, p.config.as_deref());
    m.config.extend(s.entries());
    m.config.insert("evaluate.identity".into(), identity.to_string());
    m.seeds.insert("eval".into(), s.eval.seed);
    m.seeds.insert("split".into(), s.split_seed);
    m.checksum_inputs(&p.ckpt, "input_ckpt").map_err(|e| io_err(&p.ckpt, e))?;
    m.checksum_inputs(&p.classifier, "input_classifier")
        .map_err(|e| io_err(&p.classifier, e))?;
    m.finished_unix = now_unix();
    let json = metrics_json(&eval, s.eval.seed, &m);
    write(&p.out, serde_json::to_string_pretty(&json).expect("metrics serialize") + "\n")
}
