//! Synthetic colored-shape dataset with Bangla captions.

use std::path::Path;

use super::dataset::{write_dataset, RawRecord};
use crate::error::{Error, Result};
use crate::image::RgbImage;
use crate::numerics::RngStream;

pub const BACKGROUND: [u8; 3] = [16, 16, 24];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

impl Shape {
    pub fn word(self) -> &'static str {
        match self {
            Shape::Circle => "বৃত্ত",
            Shape::Square => "বর্গ",
            Shape::Triangle => "ত্রিভুজ",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToySpec {
    pub n_images: usize,
    pub image_size: usize,
    pub shapes: Vec<Shape>,
    pub colors: Vec<(String, [u8; 3])>,
    pub captions_per_image: usize,
    pub seed: u64,
}

impl Default for ToySpec {
    fn default() -> Self {
        let colors = [
            ("লাল", [220, 40, 40]),
            ("সবুজ", [40, 190, 60]),
            ("নীল", [50, 80, 230]),
            ("হলুদ", [235, 220, 50]),
            ("কমলা", [245, 140, 30]),
            ("বেগুনি", [150, 60, 200]),
            ("গোলাপি", [245, 130, 190]),
            ("সাদা", [240, 240, 240]),
        ];
        ToySpec {
            n_images: 240,
            image_size: 32,
            shapes: vec![Shape::Circle, Shape::Square, Shape::Triangle],
            colors: colors.iter().map(|(w, c)| (w.to_string(), *c)).collect(),
            captions_per_image: 10,
            seed: 0,
        }
    }
}

impl ToySpec {
    pub fn num_classes(&self) -> usize {
        self.colors.len() * self.shapes.len()
    }
}

/// Ground truth for one rendered image.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ToyMeta {
    pub color: usize,
    pub shape: usize,
    /// Shape center in pixel coordinates.
    pub cx: f64,
    pub cy: f64,
    /// Half extent in pixels.
    pub radius: f64,
}

#[derive(Clone, Debug)]
pub struct ToySample {
    pub record: RawRecord,
    pub image: RgbImage,
    pub meta: ToyMeta,
}

const TEMPLATES: [&str; 10] = [
    "একটি {c} {s}",
    "{c} রঙের একটি {s}",
    "ছবিতে একটি {c} {s} আছে",
    "অন্ধকার পটে {c} {s}",
    "একটি {s}, রং {c}",
    "এখানে {c} রঙের {s} দেখা যাচ্ছে",
    "এই ছবির {s} {c}",
    "গাঢ় পটের উপর একটি {c} {s}",
    "{c} {s} আঁকা",
    "ছবির মধ্যে {c} রঙের একটি {s} আছে",
];

pub fn render_shape(size: usize, shape: Shape, rgb: [u8; 3], cx: f64, cy: f64, r: f64) -> RgbImage {
    let mut img = RgbImage::filled(size, size, BACKGROUND);
    for y in 0..size {
        for x in 0..size {
            let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
            let inside = match shape {
                Shape::Circle => dx * dx + dy * dy <= r * r,
                Shape::Square => dx.abs() <= 0.85 * r && dy.abs() <= 0.85 * r,
                // apex up, base at cy + r
                Shape::Triangle => dy >= -r && dy <= r && dx.abs() <= 0.5 * (dy + r),
            };
            if inside {
                img.put(x, y, rgb);
            }
        }
    }
    img
}

/// Image `i` gets class `i mod (colors·shapes)`; position, size and caption
/// template order come from the seed.
pub fn gen_toy_dataset(spec: &ToySpec) -> Result<Vec<ToySample>> {
    if spec.n_images == 0 || spec.shapes.is_empty() || spec.colors.is_empty() {
        return Err(Error::Dataset("toy spec needs images, shapes and colors".into()));
    }
    if spec.image_size < 8 {
        return Err(Error::Dataset(format!("image size {} below 8", spec.image_size)));
    }
    let mut rng = RngStream::new(spec.seed, "toy");
    let size = spec.image_size as f64;
    let n_classes = spec.num_classes();
    let mut out = Vec::with_capacity(spec.n_images);
    for i in 0..spec.n_images {
        let class = i % n_classes;
        let (color, shape) = (class / spec.shapes.len(), class % spec.shapes.len());
        let radius = rng.uniform_range(0.22, 0.32) * size;
        let cx = rng.uniform_range(radius + 1.0, size - radius - 1.0);
        let cy = rng.uniform_range(radius + 1.0, size - radius - 1.0);
        let (cword, rgb) = &spec.colors[color];
        let sh = spec.shapes[shape];
        let image = render_shape(spec.image_size, sh, *rgb, cx, cy, radius);
        let offset = rng.below(TEMPLATES.len());
        let captions = (0..spec.captions_per_image)
            .map(|k| {
                TEMPLATES[(offset + k) % TEMPLATES.len()]
                    .replace("{c}", cword)
                    .replace("{s}", sh.word())
            })
            .collect();
        let stem = format!("img_{i:05}");
        out.push(ToySample {
            record: RawRecord {
                image_path: Path::new("images").join(format!("{stem}.ppm")),
                stem,
                captions,
                class_label: class,
            },
            image,
            meta: ToyMeta {
                color,
                shape,
                cx,
                cy,
                radius,
            },
        });
    }
    Ok(out)
}

/// Generates and writes the dataset under `dir`, returning samples whose
/// image paths point into `dir`.
pub fn write_toy_dataset(dir: &Path, spec: &ToySpec) -> Result<Vec<ToySample>> {
    let mut samples = gen_toy_dataset(spec)?;
    for s in &mut samples {
        s.record.image_path = dir.join(&s.record.image_path);
    }
    let pairs: Vec<_> = samples.iter().map(|s| (s.record.clone(), s.image.clone())).collect();
    write_dataset(dir, &pairs)?;
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::textdata::{load_raw_dataset, tokenize};

    #[test]
    fn counts_and_caption_words() {
        let spec = ToySpec {
            n_images: 8,
            ..ToySpec::default()
        };
        let samples = gen_toy_dataset(&spec).unwrap();
        assert_eq!(samples.len(), 8);
        let mut n_caps = 0;
        for s in &samples {
            let cword = &spec.colors[s.meta.color].0;
            let sword = spec.shapes[s.meta.shape].word();
            for c in &s.record.captions {
                let toks = tokenize(c);
                assert!(toks.iter().any(|t| t == cword), "{c}");
                assert!(toks.iter().any(|t| t == sword), "{c}");
                n_caps += 1;
            }
        }
        assert_eq!(n_caps, 80);
    }

    #[test]
    fn captions_name_exactly_one_color_and_shape() {
        let spec = ToySpec::default();
        for s in gen_toy_dataset(&spec).unwrap() {
            for c in &s.record.captions {
                let toks = tokenize(c);
                let colors: Vec<_> = spec.colors.iter().filter(|(w, _)| toks.contains(w)).collect();
                let shapes: Vec<_> = spec.shapes.iter().filter(|sh| toks.iter().any(|t| t == sh.word())).collect();
                assert_eq!(colors.len(), 1, "{c}");
                assert_eq!(shapes.len(), 1, "{c}");
            }
        }
    }

    /// Independent pixel oracle: the foreground is every non-background pixel;
    /// it must be a single declared color, and the bounding-box fill ratio
    /// identifies the shape (square ≈ 1, circle ≈ π/4, triangle ≈ 1/2).
    #[test]
    fn pixel_oracle_agrees_with_metadata() {
        let spec = ToySpec::default();
        for s in gen_toy_dataset(&spec).unwrap() {
            let img = &s.image;
            let (mut n, mut x0, mut x1, mut y0, mut y1) = (0usize, usize::MAX, 0, usize::MAX, 0);
            for y in 0..img.height {
                for x in 0..img.width {
                    let px = img.get(x, y);
                    if px == BACKGROUND {
                        continue;
                    }
                    assert_eq!(px, spec.colors[s.meta.color].1);
                    n += 1;
                    x0 = x0.min(x);
                    x1 = x1.max(x);
                    y0 = y0.min(y);
                    y1 = y1.max(y);
                }
            }
            assert!(n > 20, "foreground too small: {n}");
            let fill = n as f64 / ((x1 - x0 + 1) * (y1 - y0 + 1)) as f64;
            let guess = if fill > 0.93 {
                Shape::Square
            } else if fill > 0.65 {
                Shape::Circle
            } else {
                Shape::Triangle
            };
            assert_eq!(guess, spec.shapes[s.meta.shape], "fill {fill}");
            // shape stays inside the frame
            assert!(x0 > 0 && y0 > 0 && x1 < img.width - 1 && y1 < img.height - 1);
        }
    }

    #[test]
    fn deterministic_in_seed() {
        let spec = ToySpec {
            n_images: 30,
            seed: 5,
            ..ToySpec::default()
        };
        let a = gen_toy_dataset(&spec).unwrap();
        let b = gen_toy_dataset(&spec).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.image, y.image);
            assert_eq!(x.record, y.record);
        }
        let c = gen_toy_dataset(&ToySpec { seed: 6, ..spec }).unwrap();
        assert!(a.iter().zip(&c).any(|(x, y)| x.image != y.image));
    }

    #[test]
    fn written_tree_loads_back() {
        let dir = tempfile::tempdir().unwrap();
        let spec = ToySpec {
            n_images: 6,
            ..ToySpec::default()
        };
        let written = write_toy_dataset(dir.path(), &spec).unwrap();
        let loaded = load_raw_dataset(dir.path(), 10).unwrap();
        assert_eq!(loaded.len(), 6);
        for (w, l) in written.iter().zip(&loaded) {
            assert_eq!(w.record, *l);
            assert_eq!(RgbImage::load(&l.image_path).unwrap(), w.image);
        }
    }

    #[test]
    fn classes_are_balanced() {
        let samples = gen_toy_dataset(&ToySpec::default()).unwrap();
        let mut counts = [0; 24];
        for s in &samples {
            counts[s.record.class_label] += 1;
        }
        assert!(counts.iter().all(|&c| c == 10));
    }
}
