//! Attention-based image-text matching, the word- and sentence-level
//! matching losses, encoder pretraining and retrieval evaluation.

use std::fs;
use std::path::Path;

use crate::encoders::{
    common_dim, image_encode, init_image_encoder, init_text_encoder, text_encode, EncoderConfig, WordFeatures,
};
use crate::error::{Error, Result};
use crate::image::batch_tensor;
use crate::numerics::{Adam, Bound, Graph, ParamStore, RngStream, Tensor, Var};
use crate::textdata::{DatasetSplit, Example, TokenizedCaption};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DamsmConfig {
    pub gamma1: f64,
    pub gamma2: f64,
    pub gamma3: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for DamsmConfig {
    fn default() -> Self {
        DamsmConfig {
            gamma1: 4.0,
            gamma2: 5.0,
            gamma3: 10.0,
            epochs: 40,
            batch_size: 16,
            learning_rate: 2e-3,
        }
    }
}

impl DamsmConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, g) in [("gamma1", self.gamma1), ("gamma2", self.gamma2), ("gamma3", self.gamma3)] {
            if !(g > 0.0 && g.is_finite()) {
                return Err(Error::Batch(format!("{name} must be positive, got {g}")));
            }
        }
        if self.batch_size < 2 {
            return Err(Error::Batch(format!("batch size must be at least 2, got {}", self.batch_size)));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Batch(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        Ok(())
    }
}

/// Matching scores `R[k, l]` between image `k` (regions `v (M, D, N)`) and
/// caption `l` (word features `e (L, D, T)` whose first `n_words[l]` columns
/// are words).
pub fn matching_scores<'g>(v: Var<'g>, e: Var<'g>, n_words: &[usize], cfg: &DamsmConfig) -> Result<Var<'g>> {
    let (vs, es) = (v.shape(), e.shape());
    if vs.len() != 3 || es.len() != 3 || vs[1] != es[1] || es[0] != n_words.len() {
        return Err(Error::shape(
            "matching_score",
            format!("v {vs:?}, e {es:?}, {} word counts", n_words.len()),
        ));
    }
    let m = vs[0];
    let vn = v.l2_normalize(1)?;
    let mut cols = Vec::with_capacity(n_words.len());
    for (l, &n) in n_words.iter().enumerate() {
        if n == 0 || n > es[2] {
            return Err(Error::Mask { item: l });
        }
        let el = e.slice(0, l, 1)?.slice(2, 0, n)?;
        let en = el.l2_normalize(1)?;
        // (M, n, N): cosine of word i with region j, normalized over words
        let s = en.bmm(vn, true, false)?.softmax(1)?;
        let alpha = s.scale(cfg.gamma1)?.softmax(2)?;
        let c = v.bmm(alpha, false, true)?;
        let r = c.l2_normalize(1)?.mul(en)?.sum_axis(1)?;
        let big_r = r.scale(cfg.gamma2)?.logsumexp(2)?.scale(1.0 / cfg.gamma2)?;
        cols.push(big_r.reshape(&[m, 1])?);
    }
    v.graph().concat(&cols, 1)
}

/// Single-pair score for `v (D, N)` and the first `n_words` columns of `e (D, T)`.
pub fn matching_score(v: &Tensor, e: &Tensor, n_words: usize, cfg: &DamsmConfig) -> Result<f64> {
    let g = Graph::new();
    let (vs, es) = (v.shape(), e.shape());
    if vs.len() != 2 || es.len() != 2 {
        return Err(Error::shape("matching_score", format!("v {vs:?}, e {es:?}")));
    }
    let vv = g.constant(v.clone().reshape(&[1, vs[0], vs[1]])?);
    let ev = g.constant(e.clone().reshape(&[1, es[0], es[1]])?);
    Ok(matching_scores(vv, ev, &[n_words], cfg)?.item())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DamsmLossReport {
    pub lw1: f64,
    pub lw2: f64,
    pub ls1: f64,
    pub ls2: f64,
    pub total: f64,
}

/// Loss terms as graph values, plus their scalar report.
pub struct DamsmLoss<'g> {
    pub lw1: Var<'g>,
    pub lw2: Var<'g>,
    pub ls1: Var<'g>,
    pub ls2: Var<'g>,
    pub total: Var<'g>,
}

impl DamsmLoss<'_> {
    pub fn report(&self) -> DamsmLossReport {
        DamsmLossReport {
            lw1: self.lw1.item(),
            lw2: self.lw2.item(),
            ls1: self.ls1.item(),
            ls2: self.ls2.item(),
            total: self.total.item(),
        }
    }
}

/// `(−Σ_k log softmax_rows[k,k], −Σ_k log softmax_cols[k,k])` of `γ3 · scores`.
fn posterior_nll<'g>(scores: Var<'g>, gamma3: f64) -> Result<(Var<'g>, Var<'g>)> {
    let m = scores.shape()[0];
    let mut eye = vec![0.0; m * m];
    for k in 0..m {
        eye[k * m + k] = 1.0;
    }
    let eye = scores.graph().constant(Tensor::new(&[m, m], eye)?);
    let s = scores.scale(gamma3)?;
    let by_caption = s.log_softmax(1)?.mul(eye)?.sum()?.neg()?;
    let by_image = s.log_softmax(0)?.mul(eye)?.sum()?.neg()?;
    Ok((by_caption, by_image))
}

/// Word- and sentence-level matching losses over an aligned batch: item `k`'s
/// image matches item `k`'s caption. `n_words[k]` counts the word columns of
/// caption `k`.
pub fn damsm_loss<'g>(
    v: Var<'g>,
    v_bar: Var<'g>,
    e: Var<'g>,
    e_bar: Var<'g>,
    n_words: &[usize],
    cfg: &DamsmConfig,
) -> Result<DamsmLoss<'g>> {
    let m = v.shape()[0];
    if m < 2 {
        return Err(Error::Batch(format!("matching loss needs at least 2 pairs, got {m}")));
    }
    if e.shape()[0] != m || v_bar.shape()[0] != m || e_bar.shape()[0] != m {
        return Err(Error::shape("damsm_loss", "batch sizes differ between features"));
    }
    let r = matching_scores(v, e, n_words, cfg)?;
    let (lw1, lw2) = posterior_nll(r, cfg.gamma3)?;
    let d = v_bar.shape()[1];
    let vn = v_bar.l2_normalize(1)?.reshape(&[1, m, d])?;
    let en = e_bar.l2_normalize(1)?.reshape(&[1, m, d])?;
    let cos = vn.bmm(en, false, true)?.reshape(&[m, m])?;
    let (ls1, ls2) = posterior_nll(cos, cfg.gamma3)?;
    let total = lw1.add(lw2)?.add(ls1)?.add(ls2)?;
    Ok(DamsmLoss {
        lw1,
        lw2,
        ls1,
        ls2,
        total,
    })
}

/// Word features trimmed to the longest caption in the batch.
pub fn trim_batch(captions: &[&TokenizedCaption]) -> Vec<TokenizedCaption> {
    let t = captions.iter().map(|c| c.length).max().unwrap_or(1);
    captions
        .iter()
        .map(|c| TokenizedCaption {
            ids: c.ids[..t.min(c.ids.len())].to_vec(),
            length: c.length,
            raw: c.raw.clone(),
        })
        .collect()
}

/// Pretrained text and image encoders.
#[derive(Clone, Debug, PartialEq)]
pub struct DamsmModel {
    pub encoder: EncoderConfig,
    pub text: ParamStore,
    pub image: ParamStore,
}

impl DamsmModel {
    pub fn init(encoder: EncoderConfig, rng: &RngStream) -> Self {
        DamsmModel {
            encoder,
            text: init_text_encoder(&encoder, &mut rng.derive("text_encoder")),
            image: init_image_encoder(&encoder, &mut rng.derive("image_encoder")),
        }
    }

    pub fn d(&self) -> usize {
        self.encoder.d()
    }

    /// Parameters under `text_encoder.` / `image_encoder.` plus `encoder.tsv`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let mut all = ParamStore::new();
        all.extend_prefixed("text_encoder", &self.text);
        all.extend_prefixed("image_encoder", &self.image);
        all.save(dir)?;
        let e = &self.encoder;
        let meta = format!(
            "vocab_size\t{}\nembed_dim\t{}\nhidden\t{}\nimage_size\t{}\ndropout\t{}\n",
            e.vocab_size, e.embed_dim, e.hidden, e.image_size, e.dropout
        );
        let p = dir.join("encoder.tsv");
        fs::write(&p, meta).map_err(|err| Error::io(&p, err))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let all = ParamStore::load(dir)?;
        let p = dir.join("encoder.tsv");
        let text = fs::read_to_string(&p).map_err(|err| Error::io(&p, err))?;
        let field = |key: &str| -> Result<f64> {
            text.lines()
                .filter_map(|l| l.split_once('\t'))
                .find(|(k, _)| *k == key)
                .and_then(|(_, v)| v.trim().parse().ok())
                .ok_or_else(|| Error::Format {
                    path: p.clone(),
                    msg: format!("missing or malformed {key}"),
                })
        };
        let encoder = EncoderConfig {
            vocab_size: field("vocab_size")? as usize,
            embed_dim: field("embed_dim")? as usize,
            hidden: field("hidden")? as usize,
            image_size: field("image_size")? as usize,
            dropout: field("dropout")?,
        };
        let model = DamsmModel {
            encoder,
            text: all.sub_store("text_encoder"),
            image: all.sub_store("image_encoder"),
        };
        let d = common_dim(&model.text, &model.image)?;
        if d != encoder.d() {
            return Err(Error::Incompatible(format!("encoder.tsv says D = {}, parameters have {d}", encoder.d())));
        }
        Ok(model)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DamsmEpoch {
    pub epoch: usize,
    pub loss: DamsmLossReport,
    pub top1_c2i: f64,
    pub top1_i2c: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RetrievalReport {
    pub top1_c2i: f64,
    pub top5_c2i: f64,
    pub top1_i2c: f64,
    pub top5_i2c: f64,
}

/// Ranks of the true partner in a score matrix `r[k][l]` (image `k`, caption
/// `l`, partner on the diagonal). Ties rank by index.
pub fn retrieval_from_scores(r: &[Vec<f64>]) -> RetrievalReport {
    let n = r.len();
    let rank = |scores: &[f64], target: usize| {
        scores
            .iter()
            .enumerate()
            .filter(|&(i, &s)| s > scores[target] || (s == scores[target] && i < target))
            .count()
    };
    let (mut c1, mut c5, mut i1, mut i5) = (0, 0, 0, 0);
    for k in 0..n {
        let col: Vec<f64> = (0..n).map(|img| r[img][k]).collect();
        let rc = rank(&col, k);
        let ri = rank(&r[k], k);
        c1 += (rc == 0) as usize;
        c5 += (rc < 5) as usize;
        i1 += (ri == 0) as usize;
        i5 += (ri < 5) as usize;
    }
    let f = |c: usize| c as f64 / n as f64;
    RetrievalReport {
        top1_c2i: f(c1),
        top5_c2i: f(c5),
        top1_i2c: f(i1),
        top5_i2c: f(i5),
    }
}

/// Score matrix between every image and caption 0 of every example.
pub fn score_matrix(model: &DamsmModel, examples: &[Example], cfg: &DamsmConfig) -> Result<Vec<Vec<f64>>> {
    if examples.is_empty() {
        return Err(Error::Dataset("retrieval needs a non-empty test split".into()));
    }
    let g = Graph::new();
    let tb = Bound::frozen(&g, &model.text);
    let ib = Bound::frozen(&g, &model.image);
    let caps: Vec<&TokenizedCaption> = examples.iter().map(|ex| &ex.record.captions[0]).collect();
    let trimmed = trim_batch(&caps);
    let refs: Vec<&TokenizedCaption> = trimmed.iter().collect();
    let (words, _) = text_encode(&tb, &refs, None)?;
    let imgs: Vec<_> = examples.iter().map(|ex| &ex.image).collect();
    let (v, _) = image_encode(&ib, g.constant(batch_tensor(&imgs)?), model.encoder.image_size)?;
    let n_words: Vec<usize> = refs.iter().map(|c| c.num_words()).collect();
    let r = matching_scores(v, words.e, &n_words, cfg)?.value();
    let n = examples.len();
    Ok((0..n).map(|k| r.data()[k * n..(k + 1) * n].to_vec()).collect())
}

/// Caption-to-image and image-to-caption retrieval on `examples`, using
/// caption 0 of each.
pub fn retrieval_eval(model: &DamsmModel, examples: &[Example], cfg: &DamsmConfig) -> Result<RetrievalReport> {
    Ok(retrieval_from_scores(&score_matrix(model, examples, cfg)?))
}

/// Encodes an aligned batch and returns its loss. `dropout` enables training mode.
pub fn batch_loss<'g>(
    tb: &Bound<'g, '_>,
    ib: &Bound<'g, '_>,
    images: Var<'g>,
    captions: &[&TokenizedCaption],
    encoder: &EncoderConfig,
    cfg: &DamsmConfig,
    dropout: Option<(f64, &mut RngStream)>,
) -> Result<DamsmLoss<'g>> {
    let trimmed = trim_batch(captions);
    let refs: Vec<&TokenizedCaption> = trimmed.iter().collect();
    let (WordFeatures { e, .. }, e_bar) = text_encode(tb, &refs, dropout)?;
    let (v, v_bar) = image_encode(ib, images, encoder.image_size)?;
    let n_words: Vec<usize> = refs.iter().map(|c| c.num_words()).collect();
    damsm_loss(v, v_bar, e, e_bar, &n_words, cfg)
}

/// Index batches of an epoch: shuffled, `batch_size` each, a trailing batch
/// kept only if it has at least two items.
pub fn epoch_batches(n: usize, batch_size: usize, rng: &mut RngStream) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    order
        .chunks(batch_size)
        .filter(|c| c.len() >= 2)
        .map(<[usize]>::to_vec)
        .collect()
}

/// Adam on the total matching loss, one uniformly drawn caption per image per
/// epoch. History rows hold mean per-batch train losses and held-out top-1
/// retrieval after the epoch.
pub fn train_damsm(
    split: &DatasetSplit<Example>,
    encoder: EncoderConfig,
    cfg: &DamsmConfig,
    seed: u64,
    mut on_epoch: impl FnMut(&DamsmEpoch),
) -> Result<(DamsmModel, Vec<DamsmEpoch>)> {
    cfg.validate()?;
    if split.train.len() < 2 {
        return Err(Error::Dataset(format!("train split has {} images", split.train.len())));
    }
    let root = RngStream::new(seed, "damsm");
    let mut model = DamsmModel::init(encoder, &root.derive("init"));
    let mut order_rng = root.derive("order");
    let mut caption_rng = root.derive("caption");
    let mut dropout_rng = root.derive("dropout");
    let mut adam_t = Adam::new(cfg.learning_rate, 0.9, 0.999);
    let mut adam_i = Adam::new(cfg.learning_rate, 0.9, 0.999);
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        let fail = |e: Error| Error::Training {
            epoch,
            component: "damsm".into(),
            msg: e.to_string(),
        };
        let mut sums = [0.0; 5];
        let batches = epoch_batches(split.train.len(), cfg.batch_size, &mut order_rng);
        for batch in &batches {
            let caps: Vec<&TokenizedCaption> = batch
                .iter()
                .map(|&i| {
                    let c = &split.train[i].record.captions;
                    &c[caption_rng.below(c.len())]
                })
                .collect();
            let imgs: Vec<_> = batch.iter().map(|&i| &split.train[i].image).collect();
            let (rep, gt, gi) = {
                let g = Graph::new();
                let tb = Bound::trainable(&g, &model.text);
                let ib = Bound::trainable(&g, &model.image);
                let x = g.constant(batch_tensor(&imgs).map_err(fail)?);
                let loss = batch_loss(&tb, &ib, x, &caps, &encoder, cfg, Some((encoder.dropout, &mut dropout_rng)))
                    .map_err(fail)?;
                let grads = g.backward(loss.total).map_err(fail)?;
                (loss.report(), tb.gradients(&grads), ib.gradients(&grads))
            };
            if !rep.total.is_finite() {
                return Err(fail(Error::numerics("damsm_loss", "non-finite loss")));
            }
            adam_t.update(&mut model.text, &gt).map_err(fail)?;
            adam_i.update(&mut model.image, &gi).map_err(fail)?;
            for (s, v) in sums.iter_mut().zip([rep.lw1, rep.lw2, rep.ls1, rep.ls2, rep.total]) {
                *s += v;
            }
        }
        let nb = batches.len().max(1) as f64;
        let (top1_c2i, top1_i2c) = if split.test.is_empty() {
            (0.0, 0.0)
        } else {
            let r = retrieval_eval(&model, &split.test, cfg).map_err(fail)?;
            (r.top1_c2i, r.top1_i2c)
        };
        let row = DamsmEpoch {
            epoch,
            loss: DamsmLossReport {
                lw1: sums[0] / nb,
                lw2: sums[1] / nb,
                ls1: sums[2] / nb,
                ls2: sums[3] / nb,
                total: sums[4] / nb,
            },
            top1_c2i,
            top1_i2c,
        };
        on_epoch(&row);
        history.push(row);
    }
    Ok((model, history))
}

/// `epoch,lw1,lw2,ls1,ls2,total,top1_c2i,top1_i2c` with 6 decimals.
pub fn history_csv(rows: &[DamsmEpoch]) -> String {
    let mut out = String::from("epoch,lw1,lw2,ls1,ls2,total,top1_c2i,top1_i2c\n");
    for r in rows {
        let l = &r.loss;
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            r.epoch, l.lw1, l.lw2, l.ls1, l.ls2, l.total, r.top1_c2i, r.top1_i2c
        ));
    }
    out
}
