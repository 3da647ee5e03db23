//! Three-stage attentional generator, per-stage discriminators, their losses
//! and the adversarial training loop.

use std::fs;
use std::path::Path;

use crate::attention::{project_words, word_context};
use crate::damsm::{damsm_loss, trim_batch, DamsmConfig, DamsmModel};
use crate::encoders::{image_encode, text_encode, word_mask};
use crate::error::{Error, Result};
use crate::image::{batch_tensor, downsample2x, images_from_tensor, RgbImage};
use crate::numerics::{gaussian_kl, reparam_sample, Adam, Bound, Graph, ParamStore, RngStream, Tensor, Var};
use crate::textdata::{DatasetSplit, Example, TokenizedCaption};

pub const STAGES: usize = 3;
const LEAK: f64 = 0.2;
const BN_EPS: f64 = 1e-5;

/// Side length of stage `i` output.
pub fn stage_size(i: usize) -> usize {
    8 << i
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GanConfig {
    pub beta: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_g: f64,
    pub lr_d: f64,
    pub z_dim: usize,
    pub dc: usize,
    /// Channels of `h₀`; later stages use half.
    pub ngf: usize,
    /// Channels of the discriminator stem; the trunk doubles up to `4·ndf`.
    pub ndf: usize,
    pub seed: u64,
}

impl Default for GanConfig {
    fn default() -> Self {
        GanConfig {
            beta: 5.0,
            epochs: 120,
            batch_size: 16,
            lr_g: 2e-4,
            lr_d: 2e-4,
            z_dim: 16,
            dc: 16,
            ngf: 16,
            ndf: 8,
            seed: 0,
        }
    }
}

impl GanConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::Batch(format!("beta must be non-negative, got {}", self.beta)));
        }
        if self.z_dim == 0 || self.dc == 0 || self.ngf < 2 || self.ngf % 2 != 0 || self.ndf == 0 {
            return Err(Error::Batch("z_dim, dc, ndf must be ≥ 1 and ngf even".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Batch(format!("batch size must be at least 2, got {}", self.batch_size)));
        }
        Ok(())
    }
}

fn conv<'g>(p: &Bound<'g, '_>, name: &str, x: Var<'g>, stride: usize) -> Result<Var<'g>> {
    let w = p.get(&format!("{name}.w"))?;
    let pad = w.shape()[2] / 2;
    x.conv2d(w, Some(p.get(&format!("{name}.b"))?), stride, pad)
}

fn init_conv(p: &mut ParamStore, name: &str, o: usize, i: usize, rng: &mut RngStream) {
    p.init_fan_in(&format!("{name}.w"), &[o, i, 3, 3], rng);
    p.init_const(&format!("{name}.b"), &[o], 0.0);
}

pub fn init_generator(cfg: &GanConfig, d: usize, rng: &mut RngStream) -> ParamStore {
    let mut p = ParamStore::new();
    let (c0, c1) = (cfg.ngf, cfg.ngf / 2);
    p.init_fan_in("ca.w", &[2 * cfg.dc, d], rng);
    p.init_const("ca.b", &[2 * cfg.dc], 0.0);
    p.init_fan_in("f0.fc.w", &[16 * 2 * c0, cfg.z_dim + cfg.dc], rng);
    p.init_const("f0.fc.b", &[16 * 2 * c0], 0.0);
    init_conv(&mut p, "f0.conv", c0, 2 * c0, rng);
    for (stage, hc, out) in [(1, c0, c1), (2, c1, c1)] {
        p.init_uniform(&format!("f{stage}.u"), &[hc, d], (1.0 / d as f64).sqrt(), rng);
        for r in 0..2 {
            init_conv(&mut p, &format!("f{stage}.res{r}.a"), 2 * hc, 2 * hc, rng);
            init_conv(&mut p, &format!("f{stage}.res{r}.b"), 2 * hc, 2 * hc, rng);
        }
        init_conv(&mut p, &format!("f{stage}.up"), out, 2 * hc, rng);
    }
    for (i, c) in [(0, c0), (1, c1), (2, c1)] {
        init_conv(&mut p, &format!("g{i}"), 3, c, rng);
    }
    p
}

/// Discriminator for stage `stage` (input side `8·2^stage`).
pub fn init_discriminator(cfg: &GanConfig, d: usize, stage: usize, rng: &mut RngStream) -> ParamStore {
    let mut p = ParamStore::new();
    let top = 4 * cfg.ndf;
    init_conv(&mut p, "stem", cfg.ndf, 3, rng);
    let mut c = cfg.ndf;
    for k in 0..=stage {
        let out = if k == stage { top } else { (2 * c).min(top) };
        init_conv(&mut p, &format!("down{k}"), out, c, rng);
        p.init_const(&format!("down{k}.bn.gamma"), &[out], 1.0);
        p.init_const(&format!("down{k}.bn.beta"), &[out], 0.0);
        c = out;
    }
    p.init_fan_in("uncond.w", &[1, top * 16], rng);
    p.init_const("uncond.b", &[1], 0.0);
    init_conv(&mut p, "joint", top, top + d, rng);
    p.init_fan_in("cond.w", &[1, top * 16], rng);
    p.init_const("cond.b", &[1], 0.0);
    p
}

/// Conditioning augmentation output.
#[derive(Clone, Copy, Debug)]
pub struct CaOutput<'g> {
    pub c_hat: Var<'g>,
    pub mu: Var<'g>,
    pub logvar: Var<'g>,
    /// `gaussian_kl` averaged over the batch.
    pub kl: Var<'g>,
}

/// Affine map of `ē` to `(μ, log σ²)`; samples when `rng` is given, else
/// returns `μ`.
pub fn condition_augment<'g>(p: &Bound<'g, '_>, e_bar: Var<'g>, rng: Option<&mut RngStream>) -> Result<CaOutput<'g>> {
    let out = e_bar.linear(p.get("ca.w")?, Some(p.get("ca.b")?))?;
    let dc = out.shape()[1] / 2;
    let mu = out.slice(1, 0, dc)?;
    let logvar = out.slice(1, dc, dc)?;
    let c_hat = match rng {
        Some(r) => reparam_sample(mu, logvar, r)?,
        None => mu,
    };
    let kl = gaussian_kl(mu, logvar)?.scale(1.0 / e_bar.shape()[0] as f64)?;
    Ok(CaOutput { c_hat, mu, logvar, kl })
}

pub struct Pyramid<'g> {
    pub images: [Var<'g>; STAGES],
    /// Attention maps `(B, T, N)` of stages 1 and 2.
    pub attn: [Var<'g>; 2],
    pub ca: CaOutput<'g>,
}

fn refine<'g>(p: &Bound<'g, '_>, stage: usize, h: Var<'g>, e: Var<'g>, mask: &[Vec<bool>]) -> Result<(Var<'g>, Var<'g>)> {
    let s = h.shape();
    let (b, ch, side) = (s[0], s[1], s[2]);
    let ep = project_words(p.get(&format!("f{stage}.u"))?, e)?;
    let flat = h.reshape(&[b, ch, side * side])?;
    let (c, alpha) = word_context(ep, mask, flat)?;
    let c = c.reshape(&[b, ch, side, side])?;
    let mut x = p.graph().concat(&[h, c], 1)?;
    for r in 0..2 {
        let y = conv(p, &format!("f{stage}.res{r}.a"), x, 1)?.relu()?;
        x = x.add(conv(p, &format!("f{stage}.res{r}.b"), y, 1)?)?;
    }
    let out = conv(p, &format!("f{stage}.up"), x.upsample2x()?, 1)?.relu()?;
    Ok((out, alpha))
}

/// Runs the stack: `h₀ = F0(z, ĉ)`, `hᵢ = Fᵢ(hᵢ₋₁, context)`, `xᵢ = tanh(Gᵢ(hᵢ))`.
/// `e` are word features `(B, D, T)` with word mask `mask`.
pub fn generate<'g>(
    p: &Bound<'g, '_>,
    z: Var<'g>,
    e_bar: Var<'g>,
    e: Var<'g>,
    mask: &[Vec<bool>],
    ca_rng: Option<&mut RngStream>,
) -> Result<Pyramid<'g>> {
    let g = p.graph();
    let b = z.shape()[0];
    if e_bar.shape()[0] != b || e.shape()[0] != b || mask.len() != b {
        return Err(Error::shape("generate", "noise, sentence and word batches differ"));
    }
    let ca = condition_augment(p, e_bar, ca_rng)?;
    let fc = g
        .concat(&[z, ca.c_hat], 1)?
        .linear(p.get("f0.fc.w")?, Some(p.get("f0.fc.b")?))?;
    let ch = fc.shape()[1] / 16;
    let x = fc.reshape(&[b, ch, 4, 4])?.relu()?.upsample2x()?;
    let h0 = conv(p, "f0.conv", x, 1)?.relu()?;
    let (h1, a1) = refine(p, 1, h0, e, mask)?;
    let (h2, a2) = refine(p, 2, h1, e, mask)?;
    let out = |i: usize, h: Var<'g>| conv(p, &format!("g{i}"), h, 1)?.tanh();
    Ok(Pyramid {
        images: [out(0, h0)?, out(1, h1)?, out(2, h2)?],
        attn: [a1, a2],
        ca,
    })
}

/// Shared trunk: `(B, 3, S, S)` → `(B, 4·ndf, 4, 4)`.
pub fn disc_features<'g>(p: &Bound<'g, '_>, stage: usize, x: Var<'g>) -> Result<Var<'g>> {
    let s = x.shape();
    let want = stage_size(stage);
    if s.len() != 4 || s[1] != 3 || s[2] != want || s[3] != want {
        return Err(Error::shape(
            "discriminator",
            format!("stage {stage} expects (B, 3, {want}, {want}), got {s:?}"),
        ));
    }
    let mut h = conv(p, "stem", x, 1)?.leaky_relu(LEAK)?;
    for k in 0..=stage {
        h = conv(p, &format!("down{k}"), h, 2)?
            .batch_norm(p.get(&format!("down{k}.bn.gamma"))?, p.get(&format!("down{k}.bn.beta"))?, BN_EPS)?
            .leaky_relu(LEAK)?;
    }
    Ok(h)
}

pub fn uncond_logits<'g>(p: &Bound<'g, '_>, feat: Var<'g>) -> Result<Var<'g>> {
    let s = feat.shape();
    feat.reshape(&[s[0], s[1] * s[2] * s[3]])?
        .linear(p.get("uncond.w")?, Some(p.get("uncond.b")?))
}

/// Joint head on the trunk features and the sentence feature tiled over 4×4.
pub fn cond_logits<'g>(p: &Bound<'g, '_>, feat: Var<'g>, e_bar: Var<'g>) -> Result<Var<'g>> {
    let s = feat.shape();
    let d = e_bar.shape()[1];
    let ones = feat.graph().constant(Tensor::full(&[1, 1, s[2], s[3]], 1.0));
    let tiled = e_bar.reshape(&[s[0], d, 1, 1])?.mul(ones)?;
    let h = conv(p, "joint", feat.graph().concat(&[feat, tiled], 1)?, 1)?.leaky_relu(LEAK)?;
    h.reshape(&[s[0], s[1] * s[2] * s[3]])?
        .linear(p.get("cond.w")?, Some(p.get("cond.b")?))
}

/// Rows of `x (B, …)` rotated by one: row `k` takes row `(k + 1) mod B`.
pub fn rotate_batch<'g>(x: Var<'g>) -> Result<Var<'g>> {
    let b = x.shape()[0];
    x.graph().concat(&[x.slice(0, 1, b - 1)?, x.slice(0, 0, 1)?], 0)
}

/// BCE combination for one discriminator: mean of the unconditional terms
/// plus half the mean of the three conditional terms.
pub fn d_loss_from_logits<'g>(
    real_u: Var<'g>,
    fake_u: Var<'g>,
    real_c: Var<'g>,
    fake_c: Var<'g>,
    mismatch_c: Var<'g>,
) -> Result<Var<'g>> {
    let ones = vec![1.0; real_u.shape()[0]];
    let zeros = vec![0.0; real_u.shape()[0]];
    let uncond = real_u.bce_with_logits(&ones)?.add(fake_u.bce_with_logits(&zeros)?)?.scale(0.5)?;
    let cond = real_c
        .bce_with_logits(&ones)?
        .add(fake_c.bce_with_logits(&zeros)?)?
        .add(mismatch_c.bce_with_logits(&zeros)?)?
        .scale(1.0 / 3.0)?;
    uncond.add(cond.scale(0.5)?)
}

/// Discriminator loss on real and (detached) fake images at stage `stage`.
pub fn discriminator_loss<'g>(
    p: &Bound<'g, '_>,
    stage: usize,
    real: Var<'g>,
    fake: Var<'g>,
    e_bar: Var<'g>,
) -> Result<Var<'g>> {
    if real.shape()[0] < 2 {
        return Err(Error::Batch("mismatched pairs need a batch of at least 2".into()));
    }
    let fr = disc_features(p, stage, real)?;
    let ff = disc_features(p, stage, fake.detach())?;
    d_loss_from_logits(
        uncond_logits(p, fr)?,
        uncond_logits(p, ff)?,
        cond_logits(p, fr, e_bar)?,
        cond_logits(p, ff, e_bar)?,
        cond_logits(p, fr, rotate_batch(e_bar)?)?,
    )
}

/// `L_Gᵢ`: both heads of `Dᵢ` pushed towards "real" on the generated image.
pub fn stage_generator_loss<'g>(p: &Bound<'g, '_>, stage: usize, fake: Var<'g>, e_bar: Var<'g>) -> Result<Var<'g>> {
    let f = disc_features(p, stage, fake)?;
    let ones = vec![1.0; fake.shape()[0]];
    uncond_logits(p, f)?
        .bce_with_logits(&ones)?
        .add(cond_logits(p, f, e_bar)?.bce_with_logits(&ones)?)
}

pub struct GeneratorLoss<'g> {
    pub stages: [Var<'g>; STAGES],
    pub lg: Var<'g>,
    pub damsm: Var<'g>,
    pub kl: Var<'g>,
    pub total: Var<'g>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GeneratorLossReport {
    pub stages: [f64; STAGES],
    pub lg: f64,
    pub damsm: f64,
    pub kl: f64,
    pub total: f64,
}

impl GeneratorLoss<'_> {
    pub fn report(&self) -> GeneratorLossReport {
        GeneratorLossReport {
            stages: [self.stages[0].item(), self.stages[1].item(), self.stages[2].item()],
            lg: self.lg.item(),
            damsm: self.damsm.item(),
            kl: self.kl.item(),
            total: self.total.item(),
        }
    }
}

/// `L = Σᵢ L_Gᵢ + β · L_DAMSM + kl`.
pub fn combine_generator_loss<'g>(stages: [Var<'g>; STAGES], damsm: Var<'g>, kl: Var<'g>, beta: f64) -> Result<GeneratorLoss<'g>> {
    let lg = stages[0].add(stages[1])?.add(stages[2])?;
    let total = lg.add(damsm.scale(beta)?)?.add(kl)?;
    Ok(GeneratorLoss {
        stages,
        lg,
        damsm,
        kl,
        total,
    })
}

/// Text features of a caption batch from frozen encoders, as plain tensors:
/// word features `(B, D, T)`, sentence features `(B, D)`, word masks and word counts.
pub struct TextBatch {
    pub e: Tensor,
    pub e_bar: Tensor,
    pub mask: Vec<Vec<bool>>,
    pub n_words: Vec<usize>,
}

pub fn encode_captions(damsm: &DamsmModel, captions: &[&TokenizedCaption]) -> Result<TextBatch> {
    let g = Graph::new();
    let trimmed = trim_batch(captions);
    let refs: Vec<&TokenizedCaption> = trimmed.iter().collect();
    let (w, s) = text_encode(&Bound::frozen(&g, &damsm.text), &refs, None)?;
    Ok(TextBatch {
        e: (*w.e.value()).clone(),
        e_bar: (*s.value()).clone(),
        mask: refs.iter().map(|c| word_mask(c)).collect(),
        n_words: refs.iter().map(|c| c.num_words()).collect(),
    })
}

/// Generator objective with frozen discriminators and frozen matching encoders.
pub fn generator_loss<'g>(
    discs: &[Bound<'g, '_>; STAGES],
    pyramid: &Pyramid<'g>,
    text: &TextBatch,
    damsm: &DamsmModel,
    damsm_cfg: &DamsmConfig,
    beta: f64,
) -> Result<GeneratorLoss<'g>> {
    let g = discs[0].graph();
    let e_bar = g.constant(text.e_bar.clone());
    let mut stages = Vec::with_capacity(STAGES);
    for (i, d) in discs.iter().enumerate() {
        stages.push(stage_generator_loss(d, i, pyramid.images[i], e_bar)?);
    }
    let ib = Bound::frozen(g, &damsm.image);
    let (v, v_bar) = image_encode(&ib, pyramid.images[2], damsm.encoder.image_size)?;
    let dl = damsm_loss(v, v_bar, g.constant(text.e.clone()), e_bar, &text.n_words, damsm_cfg)?;
    combine_generator_loss([stages[0], stages[1], stages[2]], dl.total, pyramid.ca.kl, beta)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GanModel {
    pub cfg: GanConfig,
    pub d: usize,
    pub generator: ParamStore,
    pub discriminators: [ParamStore; STAGES],
}

impl GanModel {
    pub fn init(cfg: GanConfig, d: usize, rng: &RngStream) -> Self {
        GanModel {
            cfg,
            d,
            generator: init_generator(&cfg, d, &mut rng.derive("generator")),
            discriminators: std::array::from_fn(|i| init_discriminator(&cfg, d, i, &mut rng.derive(&format!("disc{i}")))),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let mut all = ParamStore::new();
        all.extend_prefixed("generator", &self.generator);
        for (i, d) in self.discriminators.iter().enumerate() {
            all.extend_prefixed(&format!("disc{i}"), d);
        }
        all.save(dir)?;
        let c = &self.cfg;
        let meta = format!(
            "d\t{}\nz_dim\t{}\ndc\t{}\nngf\t{}\nndf\t{}\nbeta\t{:e}\nepochs\t{}\nbatch_size\t{}\nlr_g\t{:e}\nlr_d\t{:e}\nseed\t{}\n",
            self.d, c.z_dim, c.dc, c.ngf, c.ndf, c.beta, c.epochs, c.batch_size, c.lr_g, c.lr_d, c.seed
        );
        let p = dir.join("gan.tsv");
        fs::write(&p, meta).map_err(|e| Error::io(&p, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let all = ParamStore::load(dir)?;
        let p = dir.join("gan.tsv");
        let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
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
        let cfg = GanConfig {
            z_dim: field("z_dim")? as usize,
            dc: field("dc")? as usize,
            ngf: field("ngf")? as usize,
            ndf: field("ndf")? as usize,
            beta: field("beta")?,
            epochs: field("epochs")? as usize,
            batch_size: field("batch_size")? as usize,
            lr_g: field("lr_g")?,
            lr_d: field("lr_d")?,
            seed: field("seed")? as u64,
        };
        Ok(GanModel {
            cfg,
            d: field("d")? as usize,
            generator: all.sub_store("generator"),
            discriminators: std::array::from_fn(|i| all.sub_store(&format!("disc{i}"))),
        })
    }

    /// Fails unless the generator's word projection matches the encoders' D.
    pub fn check_compatible(&self, damsm: &DamsmModel) -> Result<()> {
        let u = self.generator.require("f1.u")?.shape()[1];
        if u != damsm.d() || self.d != damsm.d() {
            return Err(Error::Incompatible(format!(
                "generator expects D = {u}, text/image encoders have D = {}",
                damsm.d()
            )));
        }
        Ok(())
    }
}

/// Stage images and attention for `captions` in evaluation mode (`ĉ = μ`).
pub struct Generated {
    pub images: [Vec<RgbImage>; STAGES],
    pub attn: [Tensor; 2],
    pub text: TextBatch,
}

pub fn generate_eval(model: &GanModel, damsm: &DamsmModel, captions: &[&TokenizedCaption], noise: &Tensor) -> Result<Generated> {
    model.check_compatible(damsm)?;
    let text = encode_captions(damsm, captions)?;
    let g = Graph::new();
    let gp = Bound::frozen(&g, &model.generator);
    let pyr = generate(
        &gp,
        g.constant(noise.clone()),
        g.constant(text.e_bar.clone()),
        g.constant(text.e.clone()),
        &text.mask,
        None,
    )?;
    let images = [
        images_from_tensor(&pyr.images[0].value())?,
        images_from_tensor(&pyr.images[1].value())?,
        images_from_tensor(&pyr.images[2].value())?,
    ];
    let attn = [(*pyr.attn[0].value()).clone(), (*pyr.attn[1].value()).clone()];
    Ok(Generated { images, attn, text })
}

/// Stage-2 images for many captions, in chunks, with noise drawn from `rng`.
pub fn generate_final_images(
    model: &GanModel,
    damsm: &DamsmModel,
    captions: &[&TokenizedCaption],
    rng: &mut RngStream,
) -> Result<Vec<RgbImage>> {
    let mut out = Vec::with_capacity(captions.len());
    for chunk in captions.chunks(32) {
        let noise = Tensor::new(&[chunk.len(), model.cfg.z_dim], rng.normals(chunk.len() * model.cfg.z_dim))?;
        let [_, _, x2] = generate_eval(model, damsm, chunk, &noise)?.images;
        out.extend(x2);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GanEpoch {
    pub epoch: usize,
    pub d: [f64; STAGES],
    pub lg: [f64; STAGES],
    pub damsm: f64,
    pub kl: f64,
    pub total: f64,
}

/// `epoch,d0,d1,d2,lg0,lg1,lg2,damsm,kl,total` with 6 decimals.
pub fn history_csv(rows: &[GanEpoch]) -> String {
    let mut out = String::from("epoch,d0,d1,d2,lg0,lg1,lg2,damsm,kl,total\n");
    for r in rows {
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            r.epoch, r.d[0], r.d[1], r.d[2], r.lg[0], r.lg[1], r.lg[2], r.damsm, r.kl, r.total
        ));
    }
    out
}

/// Real images at every stage resolution (2× average pooling).
pub fn real_pyramid(images: &[&RgbImage]) -> Result<[Tensor; STAGES]> {
    let x2 = batch_tensor(images)?;
    let x1 = downsample2x(&x2)?;
    let x0 = downsample2x(&x1)?;
    Ok([x0, x1, x2])
}

/// One adversarial step: generate once, update every `Dᵢ` on the detached
/// fakes, then update the generator against the updated discriminators.
pub fn train_step(
    model: &mut GanModel,
    damsm: &DamsmModel,
    damsm_cfg: &DamsmConfig,
    images: &[&RgbImage],
    captions: &[&TokenizedCaption],
    opt_g: &mut Adam,
    opt_d: &mut [Adam; STAGES],
    rng: &mut RngStream,
) -> Result<([f64; STAGES], GeneratorLossReport)> {
    let b = images.len();
    let text = encode_captions(damsm, captions)?;
    let real = real_pyramid(images)?;
    let z = Tensor::new(&[b, model.cfg.z_dim], rng.normals(b * model.cfg.z_dim))?;

    let g = Graph::new();
    let gp = Bound::trainable(&g, &model.generator);
    let pyr = generate(
        &gp,
        g.constant(z),
        g.constant(text.e_bar.clone()),
        g.constant(text.e.clone()),
        &text.mask,
        Some(rng),
    )?;

    let mut d_losses = [0.0; STAGES];
    for i in 0..STAGES {
        let fail = |e: Error| wrap(e, &format!("d{i}"));
        let dg = Graph::new();
        let dp = Bound::trainable(&dg, &model.discriminators[i]);
        let fake = dg.constant((*pyr.images[i].value()).clone());
        let loss = discriminator_loss(&dp, i, dg.constant(real[i].clone()), fake, dg.constant(text.e_bar.clone()))
            .map_err(fail)?;
        let grads = dp.gradients(&dg.backward(loss).map_err(fail)?);
        d_losses[i] = loss.item();
        opt_d[i].update(&mut model.discriminators[i], &grads).map_err(fail)?;
    }

    let fail = |e: Error| wrap(e, "generator");
    let discs: [Bound<'_, '_>; STAGES] = std::array::from_fn(|i| Bound::frozen(&g, &model.discriminators[i]));
    let loss = generator_loss(&discs, &pyr, &text, damsm, damsm_cfg, model.cfg.beta).map_err(fail)?;
    let report = loss.report();
    let grads = gp.gradients(&g.backward(loss.total).map_err(fail)?);
    drop(discs);
    drop(gp);
    opt_g.update(&mut model.generator, &grads).map_err(fail)?;
    Ok((d_losses, report))
}

/// Tags an error with the component that raised it; the epoch is filled in later.
fn wrap(e: Error, component: &str) -> Error {
    match e {
        Error::Training { .. } => e,
        other => Error::Training {
            epoch: 0,
            component: component.to_string(),
            msg: other.to_string(),
        },
    }
}

/// Adversarial training with frozen matching encoders. `on_epoch` sees each
/// history row and the current model (for sample grids and checkpoints).
pub fn train_gan(
    split: &DatasetSplit<Example>,
    damsm: &DamsmModel,
    damsm_cfg: &DamsmConfig,
    cfg: &GanConfig,
    mut on_epoch: impl FnMut(&GanEpoch, &GanModel) -> Result<()>,
) -> Result<(GanModel, Vec<GanEpoch>)> {
    cfg.validate()?;
    if split.train.len() < 2 {
        return Err(Error::Dataset(format!("train split has {} images", split.train.len())));
    }
    let root = RngStream::new(cfg.seed, "gan");
    let mut model = GanModel::init(*cfg, damsm.d(), &root.derive("init"));
    let mut order_rng = root.derive("order");
    let mut caption_rng = root.derive("caption");
    let mut noise_rng = root.derive("noise");
    let mut opt_g = Adam::new(cfg.lr_g, 0.5, 0.999);
    let mut opt_d: [Adam; STAGES] = std::array::from_fn(|_| Adam::new(cfg.lr_d, 0.5, 0.999));
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        let set_epoch = |e: Error| match e {
            Error::Training { component, msg, .. } => Error::Training { epoch, component, msg },
            other => Error::Training {
                epoch,
                component: "gan".into(),
                msg: other.to_string(),
            },
        };
        let batches = crate::damsm::epoch_batches(split.train.len(), cfg.batch_size, &mut order_rng);
        let mut acc = [0.0; 9];
        for batch in &batches {
            let imgs: Vec<&RgbImage> = batch.iter().map(|&i| &split.train[i].image).collect();
            let caps: Vec<&TokenizedCaption> = batch
                .iter()
                .map(|&i| {
                    let c = &split.train[i].record.captions;
                    &c[caption_rng.below(c.len())]
                })
                .collect();
            let (d, gl) = train_step(&mut model, damsm, damsm_cfg, &imgs, &caps, &mut opt_g, &mut opt_d, &mut noise_rng)
                .map_err(set_epoch)?;
            let vals = [d[0], d[1], d[2], gl.stages[0], gl.stages[1], gl.stages[2], gl.damsm, gl.kl, gl.total];
            if let Some(k) = vals.iter().position(|v| !v.is_finite()) {
                let names = ["d0", "d1", "d2", "lg0", "lg1", "lg2", "damsm", "kl", "total"];
                return Err(Error::Training {
                    epoch,
                    component: names[k].into(),
                    msg: "loss is not finite".into(),
                });
            }
            for (a, v) in acc.iter_mut().zip(vals) {
                *a += v;
            }
        }
        let n = batches.len().max(1) as f64;
        let row = GanEpoch {
            epoch,
            d: [acc[0] / n, acc[1] / n, acc[2] / n],
            lg: [acc[3] / n, acc[4] / n, acc[5] / n],
            damsm: acc[6] / n,
            kl: acc[7] / n,
            total: acc[8] / n,
        };
        on_epoch(&row, &model)?;
        history.push(row);
    }
    Ok((model, history))
}
