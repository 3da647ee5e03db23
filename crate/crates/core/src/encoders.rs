//! Text (bidirectional LSTM) and image (strided CNN) encoders into a shared
//! D-dimensional space.

use crate::error::{Error, Result};
use crate::numerics::{Bound, ParamStore, RngStream, Tensor, Var};
use crate::textdata::TokenizedCaption;

pub const LEAK: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    /// Hidden units per direction; `D = 2 · hidden`.
    pub hidden: usize,
    pub image_size: usize,
    pub dropout: f64,
}

impl EncoderConfig {
    pub fn new(vocab_size: usize) -> Self {
        EncoderConfig {
            vocab_size,
            embed_dim: 32,
            hidden: 32,
            image_size: 32,
            dropout: 0.2,
        }
    }

    pub fn d(&self) -> usize {
        2 * self.hidden
    }

    /// Side of the region grid (`N = R²`).
    pub fn regions_side(&self) -> usize {
        self.image_size / 4
    }
}

/// Per-word features `(B, D, T)`. `mask[b][t]` marks word positions; the
/// trailing EOS column carries features but is not a word.
#[derive(Clone, Debug)]
pub struct WordFeatures<'g> {
    pub e: Var<'g>,
    pub mask: Vec<Vec<bool>>,
}

/// Word positions of a caption: everything before EOS.
pub fn word_mask(c: &TokenizedCaption) -> Vec<bool> {
    (0..c.ids.len()).map(|t| t + 1 < c.length).collect()
}

pub fn init_text_encoder(cfg: &EncoderConfig, rng: &mut RngStream) -> ParamStore {
    let mut p = ParamStore::new();
    let (e, h) = (cfg.embed_dim, cfg.hidden);
    p.init_uniform("embedding", &[cfg.vocab_size, e], 0.1, rng);
    for dir in ["fwd", "bwd"] {
        p.init_uniform(&format!("{dir}.w_ih"), &[4 * h, e], 0.1, rng);
        p.init_uniform(&format!("{dir}.w_hh"), &[4 * h, h], 0.1, rng);
        // gate order i, f, g, o; forget bias 1
        let b: Vec<f64> = (0..4 * h).map(|k| if (h..2 * h).contains(&k) { 1.0 } else { 0.0 }).collect();
        p.insert(&format!("{dir}.b"), Tensor::from_vec(b));
    }
    p
}

pub fn init_image_encoder(cfg: &EncoderConfig, rng: &mut RngStream) -> ParamStore {
    let mut p = ParamStore::new();
    let d = cfg.d();
    for (name, o, i, k) in [
        ("block0.conv", 16, 3, 3),
        ("block1.conv", 32, 16, 3),
        ("region.conv", d, 32, 1),
        ("block2.conv", 64, 32, 3),
        ("block3.conv", 64, 64, 3),
    ] {
        p.init_fan_in(&format!("{name}.w"), &[o, i, k, k], rng);
        p.init_const(&format!("{name}.b"), &[o], 0.0);
    }
    p.init_fan_in("global.w", &[d, 64], rng);
    p.init_const("global.b", &[d], 0.0);
    p
}

/// One LSTM step. `m` is a `(B, 1)` 0/1 constant; masked rows keep their state.
fn lstm_step<'g>(
    p: &Bound<'g, '_>,
    dir: &str,
    x: Var<'g>,
    h: Var<'g>,
    c: Var<'g>,
    m: Var<'g>,
) -> Result<(Var<'g>, Var<'g>)> {
    let hid = h.shape()[1];
    let gates = x
        .linear(p.get(&format!("{dir}.w_ih"))?, Some(p.get(&format!("{dir}.b"))?))?
        .add(h.linear(p.get(&format!("{dir}.w_hh"))?, None)?)?;
    let i = gates.slice(1, 0, hid)?.sigmoid()?;
    let f = gates.slice(1, hid, hid)?.sigmoid()?;
    let g = gates.slice(1, 2 * hid, hid)?.tanh()?;
    let o = gates.slice(1, 3 * hid, hid)?.sigmoid()?;
    let c_new = f.mul(c)?.add(i.mul(g)?)?;
    let h_new = o.mul(c_new.tanh()?)?;
    let keep = m.neg()?.add_scalar(1.0)?;
    Ok((m.mul(h_new)?.add(keep.mul(h)?)?, m.mul(c_new)?.add(keep.mul(c)?)?))
}

/// Encodes a batch of equally padded captions into word features `(B, D, T)`
/// and the sentence feature `(B, D)`. Dropout on embeddings applies only when
/// `dropout` is given (training).
pub fn text_encode<'g>(
    p: &Bound<'g, '_>,
    captions: &[&TokenizedCaption],
    dropout: Option<(f64, &mut RngStream)>,
) -> Result<(WordFeatures<'g>, Var<'g>)> {
    let g = p.graph();
    let b = captions.len();
    let t_len = captions
        .first()
        .ok_or_else(|| Error::Batch("empty caption batch".into()))?
        .ids
        .len();
    if captions.iter().any(|c| c.ids.len() != t_len) {
        return Err(Error::shape("text_encode", "captions padded to different lengths"));
    }
    if let Some(c) = captions.iter().find(|c| c.length == 0 || c.length > c.ids.len()) {
        return Err(Error::shape("text_encode", format!("caption length {} of {}", c.length, c.ids.len())));
    }
    let hid = p.get("fwd.w_hh")?.shape()[1];

    // (B·T, E) in time-major order: row t·B + b
    let mut ids = Vec::with_capacity(b * t_len);
    for t in 0..t_len {
        ids.extend(captions.iter().map(|c| c.ids[t]));
    }
    let mut emb = p.get("embedding")?.embedding(&ids)?;
    if let Some((rate, rng)) = dropout {
        if rate > 0.0 {
            let keep = 1.0 - rate;
            let n: usize = emb.shape().iter().product();
            let mask: Vec<f64> = (0..n).map(|_| if rng.uniform() < keep { 1.0 / keep } else { 0.0 }).collect();
            emb = emb.mul(g.constant(Tensor::new(&emb.shape(), mask)?))?;
        }
    }
    let step_mask = |t: usize| -> Vec<f64> { captions.iter().map(|c| if t < c.length { 1.0 } else { 0.0 }).collect() };
    let active = |t: usize| captions.iter().any(|c| t < c.length);
    let zeros = g.constant(Tensor::zeros(&[b, hid]));

    let mut fwd_out = vec![None; t_len];
    let (mut h, mut c) = (zeros, zeros);
    for (t, slot) in fwd_out.iter_mut().enumerate() {
        if !active(t) {
            break;
        }
        let m = g.constant(Tensor::new(&[b, 1], step_mask(t))?);
        let x = emb.slice(0, t * b, b)?;
        (h, c) = lstm_step(p, "fwd", x, h, c, m)?;
        *slot = Some(h.mul(m)?);
    }
    let h_fwd_final = h;

    let mut bwd_out = vec![None; t_len];
    let (mut h, mut c) = (zeros, zeros);
    for t in (0..t_len).rev() {
        if !active(t) {
            continue;
        }
        let m = g.constant(Tensor::new(&[b, 1], step_mask(t))?);
        let x = emb.slice(0, t * b, b)?;
        (h, c) = lstm_step(p, "bwd", x, h, c, m)?;
        bwd_out[t] = Some(h);
    }
    let h_bwd_final = h;

    let zero_col = g.constant(Tensor::zeros(&[b, 2 * hid, 1]));
    let mut cols = Vec::with_capacity(t_len);
    for t in 0..t_len {
        cols.push(match (fwd_out[t], bwd_out[t]) {
            (Some(f), Some(bw)) => g.concat(&[f, bw], 1)?.reshape(&[b, 2 * hid, 1])?,
            _ => zero_col,
        });
    }
    let e = g.concat(&cols, 2)?;
    let sentence = g.concat(&[h_fwd_final, h_bwd_final], 1)?;
    let mask = captions.iter().map(|c| word_mask(c)).collect();
    Ok((WordFeatures { e, mask }, sentence))
}

/// Region features `(B, D, N)` and global feature `(B, D)` of a
/// `(B, 3, S, S)` batch.
pub fn image_encode<'g>(p: &Bound<'g, '_>, images: Var<'g>, image_size: usize) -> Result<(Var<'g>, Var<'g>)> {
    let s = images.shape();
    if s.len() != 4 || s[1] != 3 || s[2] != image_size || s[3] != image_size {
        return Err(Error::shape(
            "image_encode",
            format!("expected (B, 3, {image_size}, {image_size}), got {s:?}"),
        ));
    }
    let conv = |x: Var<'g>, name: &str, stride: usize, pad: usize| -> Result<Var<'g>> {
        x.conv2d(p.get(&format!("{name}.w"))?, Some(p.get(&format!("{name}.b"))?), stride, pad)
    };
    let x = conv(images, "block0.conv", 2, 1)?.leaky_relu(LEAK)?;
    let x = conv(x, "block1.conv", 2, 1)?.leaky_relu(LEAK)?;
    let r = conv(x, "region.conv", 1, 0)?;
    let rs = r.shape();
    let regions = r.reshape(&[rs[0], rs[1], rs[2] * rs[3]])?;
    let x = conv(x, "block2.conv", 2, 1)?.leaky_relu(LEAK)?;
    let x = conv(x, "block3.conv", 2, 1)?.leaky_relu(LEAK)?;
    let global = x.global_avg_pool()?.linear(p.get("global.w")?, Some(p.get("global.b")?))?;
    Ok((regions, global))
}

/// Pads every caption to the longest `max_len` in the batch.
pub fn pad_batch(captions: &[&TokenizedCaption]) -> Vec<TokenizedCaption> {
    let t = captions.iter().map(|c| c.ids.len()).max().unwrap_or(0);
    captions.iter().map(|c| c.padded_to(t)).collect()
}

/// Checks that stored encoder parameters agree on the shared dimension.
pub fn common_dim(text: &ParamStore, image: &ParamStore) -> Result<usize> {
    let hid = text.require("fwd.w_hh")?.shape()[1];
    let d_img = image.require("global.w")?.shape()[0];
    let d_reg = image.require("region.conv.w")?.shape()[0];
    if 2 * hid != d_img || d_img != d_reg {
        return Err(Error::Incompatible(format!(
            "text encoder D = {}, image encoder D = {d_img} (regions {d_reg})",
            2 * hid
        )));
    }
    Ok(d_img)
}
