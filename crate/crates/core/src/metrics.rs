//! FID and Inception-Score-style metrics over a small stand-in classifier.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::damsm::DamsmModel;
use crate::error::{Error, Result};
use crate::gan::{generate_final_images, GanModel};
use crate::image::{batch_tensor, RgbImage};
use crate::numerics::{sqrtm_psd, Adam, Bound, Graph, ParamStore, RngStream, Tensor, Var};
use crate::textdata::{Example, TokenizedCaption};

/// Name reported alongside every metric computed from this feature extractor.
pub const CLASSIFIER_ID: &str = "standin-cnn3-f32";
pub const FEATURE_DIM: usize = 32;

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianStats {
    pub mu: DVector<f64>,
    pub sigma: DMatrix<f64>,
    pub n: usize,
}

impl GaussianStats {
    pub fn dim(&self) -> usize {
        self.mu.len()
    }
}

/// Mean and unbiased covariance of feature rows, two-pass.
pub fn feature_stats(rows: &[Vec<f64>]) -> Result<GaussianStats> {
    let n = rows.len();
    if n < 2 {
        return Err(Error::Stats(format!("need at least 2 samples, got {n}")));
    }
    let f = rows[0].len();
    if f == 0 || rows.iter().any(|r| r.len() != f) {
        return Err(Error::Stats("feature rows have unequal or zero length".into()));
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Stats("non-finite feature".into()));
    }
    let mut mu = DVector::zeros(f);
    for r in rows {
        mu += DVector::from_column_slice(r);
    }
    mu /= n as f64;
    let mut sigma = DMatrix::zeros(f, f);
    for r in rows {
        let d = DVector::from_column_slice(r) - &mu;
        sigma.ger(1.0, &d, &d, 1.0);
    }
    sigma /= (n - 1) as f64;
    let sigma = (&sigma + sigma.transpose()) * 0.5;
    Ok(GaussianStats { mu, sigma, n })
}

pub fn activation_stats(classifier: &StandInClassifier, images: &[&RgbImage]) -> Result<GaussianStats> {
    if images.len() < 2 {
        return Err(Error::Stats(format!("need at least 2 images, got {}", images.len())));
    }
    feature_stats(&classifier.features(images)?)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FidResult {
    pub fid: f64,
    pub mean_term: f64,
    pub trace_term: f64,
}

/// `‖μa−μb‖² + tr(Σa + Σb − 2(Σa Σb)^½)`, with the root taken of the
/// symmetric `Σa^½ Σb Σa^½`, which has the same trace.
pub fn fid(a: &GaussianStats, b: &GaussianStats) -> Result<FidResult> {
    if a.dim() != b.dim() || a.sigma.nrows() != a.dim() || b.sigma.nrows() != b.dim() {
        return Err(Error::shape("fid", format!("feature dims {} and {}", a.dim(), b.dim())));
    }
    let mean_term = (&a.mu - &b.mu).norm_squared();
    let sa = sqrtm_psd(&a.sigma)?;
    let m = &sa * &b.sigma * &sa;
    let cross = sqrtm_psd(&((&m + m.transpose()) * 0.5))?;
    let trace_term = a.sigma.trace() + b.sigma.trace() - 2.0 * cross.trace();
    let total = mean_term + trace_term;
    if !total.is_finite() {
        return Err(Error::numerics("fid", "non-finite distance"));
    }
    Ok(FidResult {
        fid: total.max(0.0),
        mean_term,
        trace_term,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IsResult {
    pub mean: f64,
    pub std: f64,
    pub splits: usize,
}

/// exp(E_x KL(p(y|x) ‖ p(y))) over `splits` equal partitions of the rows;
/// trailing rows that do not fill a partition are dropped. `std` is the
/// population deviation across splits.
pub fn inception_score(probs: &[Vec<f64>], splits: usize) -> Result<IsResult> {
    let n = probs.len();
    if splits == 0 || n < splits {
        return Err(Error::Stats(format!("{n} rows cannot fill {splits} splits")));
    }
    let c = probs[0].len();
    for (i, row) in probs.iter().enumerate() {
        let s: f64 = row.iter().sum();
        if row.len() != c || c == 0 || row.iter().any(|p| !p.is_finite() || *p < 0.0) || (s - 1.0).abs() > 1e-6 {
            return Err(Error::Stats(format!("row {i} is not a probability vector")));
        }
    }
    let per = n / splits;
    let scores: Vec<f64> = probs
        .chunks_exact(per)
        .take(splits)
        .map(|part| {
            // running mean: identical rows give the row back bit for bit
            let mut marginal = vec![0.0; c];
            for (k, row) in part.iter().enumerate() {
                for (m, p) in marginal.iter_mut().zip(row) {
                    *m += (p - *m) / (k + 1) as f64;
                }
            }
            let kl: f64 = part
                .iter()
                .map(|row| {
                    row.iter()
                        .zip(&marginal)
                        .filter(|(p, _)| **p > 0.0)
                        .map(|(p, m)| p * (p / m).ln())
                        .sum::<f64>()
                })
                .sum::<f64>()
                / per as f64;
            kl.exp()
        })
        .collect();
    let mean = scores.iter().sum::<f64>() / splits as f64;
    let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / splits as f64;
    Ok(IsResult {
        mean,
        std: var.sqrt(),
        splits,
    })
}

/// Three-conv network: 3→16 (stride 1), 16→32 (stride 2), 32→32 (stride 2),
/// global average pool to the feature vector, then a linear head.
#[derive(Clone, Debug, PartialEq)]
pub struct StandInClassifier {
    pub params: ParamStore,
    pub classes: usize,
    pub image_size: usize,
}

impl StandInClassifier {
    pub fn init(classes: usize, image_size: usize, rng: &mut RngStream) -> Self {
        let mut p = ParamStore::new();
        for (name, cin, cout) in [("conv1", 3, 16), ("conv2", 16, 32), ("conv3", 32, FEATURE_DIM)] {
            p.init_fan_in(&format!("{name}.w"), &[cout, cin, 3, 3], rng);
            p.init_const(&format!("{name}.b"), &[cout], 0.0);
        }
        p.init_fan_in("head.w", &[classes, FEATURE_DIM], rng);
        p.init_const("head.b", &[classes], 0.0);
        StandInClassifier {
            params: p,
            classes,
            image_size,
        }
    }

    fn forward<'g>(p: &Bound<'g, '_>, x: Var<'g>) -> Result<(Var<'g>, Var<'g>)> {
        let mut h = x;
        for (name, stride) in [("conv1", 1), ("conv2", 2), ("conv3", 2)] {
            h = h
                .conv2d(p.get(&format!("{name}.w"))?, Some(p.get(&format!("{name}.b"))?), stride, 1)?
                .relu()?;
        }
        let feat = h.global_avg_pool()?;
        let logits = feat.linear(p.get("head.w")?, Some(p.get("head.b")?))?;
        Ok((feat, logits))
    }

    fn check_input(&self, images: &[&RgbImage]) -> Result<()> {
        match images.iter().find(|im| im.width != self.image_size || im.height != self.image_size) {
            Some(im) => Err(Error::shape(
                "classifier",
                format!("{}x{} image, classifier expects {}", im.width, im.height, self.image_size),
            )),
            None => Ok(()),
        }
    }

    fn run(&self, images: &[&RgbImage]) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        self.check_input(images)?;
        let (mut feats, mut probs) = (Vec::new(), Vec::new());
        for chunk in images.chunks(64) {
            let g = Graph::new();
            let p = Bound::frozen(&g, &self.params);
            let (f, logits) = Self::forward(&p, g.constant(batch_tensor(chunk)?))?;
            let pr = logits.softmax(1)?.value();
            let f = f.value();
            feats.extend(f.data().chunks(FEATURE_DIM).map(<[f64]>::to_vec));
            probs.extend(pr.data().chunks(self.classes).map(<[f64]>::to_vec));
        }
        Ok((feats, probs))
    }

    /// Penultimate features, one row per image.
    pub fn features(&self, images: &[&RgbImage]) -> Result<Vec<Vec<f64>>> {
        Ok(self.run(images)?.0)
    }

    pub fn probabilities(&self, images: &[&RgbImage]) -> Result<Vec<Vec<f64>>> {
        Ok(self.run(images)?.1)
    }

    pub fn predict(&self, images: &[&RgbImage]) -> Result<Vec<usize>> {
        Ok(self
            .probabilities(images)?
            .iter()
            .map(|p| p.iter().enumerate().fold(0, |b, (i, v)| if *v > p[b] { i } else { b }))
            .collect())
    }

    pub fn accuracy(&self, data: &[(&RgbImage, usize)]) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::Stats("accuracy of an empty set".into()));
        }
        let images: Vec<&RgbImage> = data.iter().map(|d| d.0).collect();
        let hits = self.predict(&images)?.iter().zip(data).filter(|(p, d)| **p == d.1).count();
        Ok(hits as f64 / data.len() as f64)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.params.save(dir)?;
        let p = dir.join("classifier.tsv");
        let meta = format!("id\t{CLASSIFIER_ID}\nclasses\t{}\nimage_size\t{}\n", self.classes, self.image_size);
        fs::write(&p, meta).map_err(|e| Error::io(&p, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let params = ParamStore::load(dir)?;
        let p = dir.join("classifier.tsv");
        let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        let field = |key: &str| -> Result<usize> {
            text.lines()
                .filter_map(|l| l.split_once('\t'))
                .find(|(k, _)| *k == key)
                .and_then(|(_, v)| v.trim().parse().ok())
                .ok_or_else(|| Error::Format {
                    path: p.clone(),
                    msg: format!("missing or malformed {key}"),
                })
        };
        Ok(StandInClassifier {
            params,
            classes: field("classes")?,
            image_size: field("image_size")?,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassifierConfig {
    pub max_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Stop once held-out accuracy reaches this; fail if it never does.
    /// `None` trains for `max_epochs` and never fails on accuracy.
    pub target_accuracy: Option<f64>,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            max_epochs: 40,
            batch_size: 32,
            learning_rate: 8e-3,
            target_accuracy: Some(0.95),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierReport {
    /// Held-out accuracy after each epoch.
    pub accuracy: Vec<f64>,
}

impl ClassifierReport {
    pub fn final_accuracy(&self) -> f64 {
        self.accuracy.last().copied().unwrap_or(0.0)
    }
}

/// Cross-entropy with Adam; held-out accuracy is measured after every epoch.
pub fn train_standin_classifier(
    train: &[(&RgbImage, usize)],
    test: &[(&RgbImage, usize)],
    classes: usize,
    cfg: &ClassifierConfig,
) -> Result<(StandInClassifier, ClassifierReport)> {
    if train.len() < 2 || test.is_empty() {
        return Err(Error::Dataset(format!("classifier needs data: {} train, {} test", train.len(), test.len())));
    }
    if let Some(&(_, y)) = train.iter().chain(test).find(|(_, y)| *y >= classes) {
        return Err(Error::Dataset(format!("label {y} out of range for {classes} classes")));
    }
    let root = RngStream::new(cfg.seed, "classifier");
    let size = train[0].0.width;
    let mut model = StandInClassifier::init(classes, size, &mut root.derive("init"));
    let mut order_rng = root.derive("order");
    let mut adam = Adam::new(cfg.learning_rate, 0.9, 0.999);
    let mut report = ClassifierReport { accuracy: Vec::new() };
    for epoch in 1..=cfg.max_epochs {
        let fail = |e: Error| Error::Training {
            epoch,
            component: "classifier".into(),
            msg: e.to_string(),
        };
        let mut order: Vec<usize> = (0..train.len()).collect();
        order_rng.shuffle(&mut order);
        for batch in order.chunks(cfg.batch_size) {
            let imgs: Vec<&RgbImage> = batch.iter().map(|&i| train[i].0).collect();
            let mut onehot = vec![0.0; batch.len() * classes];
            for (k, &i) in batch.iter().enumerate() {
                onehot[k * classes + train[i].1] = 1.0;
            }
            let grads = {
                let g = Graph::new();
                let p = Bound::trainable(&g, &model.params);
                let x = g.constant(batch_tensor(&imgs).map_err(fail)?);
                let (_, logits) = StandInClassifier::forward(&p, x).map_err(fail)?;
                let t = g.constant(Tensor::new(&[batch.len(), classes], onehot).map_err(fail)?);
                let loss = logits
                    .log_softmax(1)
                    .and_then(|l| l.mul(t))
                    .and_then(|l| l.sum())
                    .and_then(|l| l.scale(-1.0 / batch.len() as f64))
                    .map_err(fail)?;
                if !loss.item().is_finite() {
                    return Err(fail(Error::numerics("cross_entropy", "non-finite loss")));
                }
                p.gradients(&g.backward(loss).map_err(fail)?)
            };
            adam.update(&mut model.params, &grads).map_err(fail)?;
        }
        let acc = model.accuracy(test).map_err(fail)?;
        report.accuracy.push(acc);
        if cfg.target_accuracy.is_some_and(|t| acc >= t) {
            return Ok((model, report));
        }
    }
    match cfg.target_accuracy {
        Some(t) => Err(Error::Training {
            epoch: cfg.max_epochs,
            component: "classifier".into(),
            msg: format!("held-out accuracy {:.4} below target {t}", report.final_accuracy()),
        }),
        None => Ok((model, report)),
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalConfig {
    pub n_samples: usize,
    pub splits: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            n_samples: 512,
            splits: 4,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub fid: FidResult,
    pub is: IsResult,
    pub n_samples: usize,
    pub n_real: usize,
    pub warnings: Vec<String>,
}

/// FID of `generated` against `real` and IS of `generated`, both through the
/// classifier.
pub fn evaluate_images(
    classifier: &StandInClassifier,
    generated: &[&RgbImage],
    real: &[&RgbImage],
    splits: usize,
) -> Result<Evaluation> {
    if generated.len() < 2 * splits {
        return Err(Error::Stats(format!(
            "{} samples is fewer than 2 x {splits} splits",
            generated.len()
        )));
    }
    let mut warnings = Vec::new();
    if generated.len() < 10 * FEATURE_DIM {
        warnings.push(format!(
            "{} samples is below {} (10 x feature dim); covariance is rank-deficient",
            generated.len(),
            10 * FEATURE_DIM
        ));
    }
    let (gen_feats, gen_probs) = classifier.run(generated)?;
    let fake = feature_stats(&gen_feats)?;
    let real = activation_stats(classifier, real)?;
    Ok(Evaluation {
        fid: fid(&fake, &real)?,
        is: inception_score(&gen_probs, splits)?,
        n_samples: generated.len(),
        n_real: real.n,
        warnings,
    })
}

/// Caption `k` of sample `i` over a test split of `t` images: image `i mod t`,
/// caption `(i / t) mod captions`.
pub fn eval_captions(test: &[Example], n_samples: usize) -> Vec<&TokenizedCaption> {
    (0..n_samples)
        .map(|i| {
            let caps = &test[i % test.len()].record.captions;
            &caps[(i / test.len()) % caps.len()]
        })
        .collect()
}

/// Generates `n_samples` final-stage images from test captions and scores
/// them against the real test images.
pub fn evaluate_model(
    gan: &GanModel,
    damsm: &DamsmModel,
    classifier: &StandInClassifier,
    test: &[Example],
    cfg: &EvalConfig,
) -> Result<Evaluation> {
    if test.len() < 2 {
        return Err(Error::Stats(format!("test split has {} images", test.len())));
    }
    if cfg.n_samples < 2 * cfg.splits {
        return Err(Error::Stats(format!(
            "n_samples {} is fewer than 2 x {} splits",
            cfg.n_samples, cfg.splits
        )));
    }
    let caps = eval_captions(test, cfg.n_samples);
    let mut rng = RngStream::new(cfg.seed, "eval").derive("noise");
    let generated = generate_final_images(gan, damsm, &caps, &mut rng)?;
    let gen_refs: Vec<&RgbImage> = generated.iter().collect();
    let real: Vec<&RgbImage> = test.iter().map(|e| &e.image).collect();
    evaluate_images(classifier, &gen_refs, &real, cfg.splits)
}
