//! 8-bit RGB images and the binary PPM (P6) codec.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    /// Interleaved RGB, row-major.
    pub pixels: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        RgbImage {
            width,
            height,
            pixels: vec![0; width * height * 3],
        }
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let mut img = Self::new(width, height);
        for px in img.pixels.chunks_exact_mut(3) {
            px.copy_from_slice(&rgb);
        }
        img
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn put(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    /// `P6\n<w> <h>\n255\n` followed by raw RGB bytes.
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn from_ppm(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut fields = Vec::with_capacity(4);
        let mut pos = 0;
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err("truncated PPM header".into());
            }
            fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
        }
        pos += 1; // single whitespace byte after maxval
        if fields[0] != "P6" {
            return Err(format!("unsupported magic {:?}", fields[0]));
        }
        let parse = |s: &str| s.parse::<usize>().map_err(|e| format!("bad header field {s:?}: {e}"));
        let (w, h, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
        if maxval != 255 {
            return Err(format!("unsupported maxval {maxval}"));
        }
        let need = w * h * 3;
        if bytes.len() < pos + need {
            return Err(format!("expected {need} pixel bytes, found {}", bytes.len().saturating_sub(pos)));
        }
        Ok(RgbImage {
            width: w,
            height: h,
            pixels: bytes[pos..pos + need].to_vec(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_ppm()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_ppm(&bytes).map_err(|msg| Error::Format {
            path: path.to_path_buf(),
            msg,
        })
    }

    /// Channel-major values in `[-1, 1]`: `v / 127.5 - 1`.
    pub fn to_signed_chw(&self) -> Vec<f64> {
        let plane = self.width * self.height;
        let mut out = vec![0.0; 3 * plane];
        for (p, px) in self.pixels.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * plane + p] = px[c] as f64 / 127.5 - 1.0;
            }
        }
        out
    }

    /// Inverse mapping: `round((v + 1) · 127.5)` clamped to `[0, 255]`.
    pub fn from_signed_chw(values: &[f64], width: usize, height: usize) -> Self {
        let plane = width * height;
        let mut img = RgbImage::new(width, height);
        for p in 0..plane {
            for c in 0..3 {
                img.pixels[p * 3 + c] = to_byte(values[c * plane + p]);
            }
        }
        img
    }

    /// Tiles equal-size images row-major, `cols` per row, black gutters between tiles.
    pub fn tiles(images: &[RgbImage], cols: usize, gutter: usize) -> RgbImage {
        let (w, h) = (images[0].width, images[0].height);
        let rows = images.len().div_ceil(cols);
        let cols = cols.min(images.len());
        let mut grid = RgbImage::new(cols * w + (cols - 1) * gutter, rows * h + (rows - 1) * gutter);
        for (i, img) in images.iter().enumerate() {
            let (ox, oy) = ((i % cols) * (w + gutter), (i / cols) * (h + gutter));
            for y in 0..h {
                for x in 0..w {
                    grid.put(ox + x, oy + y, img.get(x, y));
                }
            }
        }
        grid
    }
}

pub fn to_byte(v: f64) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

/// Stacks images into a `(B, 3, H, W)` tensor in `[-1, 1]`.
pub fn batch_tensor(images: &[&RgbImage]) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| Error::shape("batch_tensor", "empty batch"))?;
    let (w, h) = (first.width, first.height);
    let mut data = Vec::with_capacity(images.len() * 3 * w * h);
    for img in images {
        if img.width != w || img.height != h {
            return Err(Error::shape(
                "batch_tensor",
                format!("{}x{} image in a {w}x{h} batch", img.width, img.height),
            ));
        }
        data.extend(img.to_signed_chw());
    }
    Tensor::new(&[images.len(), 3, h, w], data)
}

/// 2× average pooling of a `(B, C, H, W)` tensor.
pub fn downsample2x(t: &Tensor) -> Result<Tensor> {
    let s = t.shape();
    if s.len() != 4 || s[2] % 2 != 0 || s[3] % 2 != 0 {
        return Err(Error::shape("downsample2x", format!("{s:?}")));
    }
    let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; planes * oh * ow];
    for p in 0..planes {
        for y in 0..oh {
            for x in 0..ow {
                let at = |yy: usize, xx: usize| t.data()[(p * h + yy) * w + xx];
                out[(p * oh + y) * ow + x] =
                    0.25 * (at(2 * y, 2 * x) + at(2 * y, 2 * x + 1) + at(2 * y + 1, 2 * x) + at(2 * y + 1, 2 * x + 1));
            }
        }
    }
    Tensor::new(&[s[0], s[1], oh, ow], out)
}

/// Splits a `(B, 3, H, W)` tensor into images.
pub fn images_from_tensor(t: &Tensor) -> Result<Vec<RgbImage>> {
    let s = t.shape();
    if s.len() != 4 || s[1] != 3 {
        return Err(Error::shape("images_from_tensor", format!("{s:?}")));
    }
    let sz = 3 * s[2] * s[3];
    Ok((0..s[0])
        .map(|b| RgbImage::from_signed_chw(&t.data()[b * sz..(b + 1) * sz], s[3], s[2]))
        .collect())
}
