use std::fs;
use std::path::{Path, PathBuf};

use super::tokenize::tokenize_bytes;
use super::vocab::{encode_caption, TokenizedCaption, Vocabulary};
use crate::error::{Error, Result};
use crate::image::RgbImage;
use crate::numerics::RngStream;

pub const DEFAULT_CAPTIONS_PER_IMAGE: usize = 10;

/// One image with its untokenized captions, as stored on disk.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawRecord {
    pub stem: String,
    pub image_path: PathBuf,
    pub captions: Vec<String>,
    pub class_label: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CaptionRecord {
    pub image_path: String,
    pub captions: Vec<TokenizedCaption>,
    pub class_label: usize,
}

/// A record together with its decoded image.
#[derive(Clone, Debug)]
pub struct Example {
    pub record: CaptionRecord,
    pub image: RgbImage,
}

#[derive(Clone, Debug)]
pub struct DatasetSplit<R> {
    pub train: Vec<R>,
    pub test: Vec<R>,
    pub ratio: (f64, f64),
    pub seed: u64,
}

/// Reads `classes.tsv`, `captions/<stem>.txt` and checks `images/<stem>.ppm`
/// exists. Records come back sorted by stem.
pub fn load_raw_dataset(dir: &Path, captions_per_image: usize) -> Result<Vec<RawRecord>> {
    let captions_dir = dir.join("captions");
    let images_dir = dir.join("images");
    for d in [&captions_dir, &images_dir] {
        if !d.is_dir() {
            return Err(Error::io(
                d.as_path(),
                std::io::Error::new(std::io::ErrorKind::NotFound, "directory not found"),
            ));
        }
    }
    let classes_path = dir.join("classes.tsv");
    let classes = fs::read_to_string(&classes_path).map_err(|e| Error::io(&classes_path, e))?;
    let mut records = Vec::new();
    for (lineno, line) in classes.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let (stem, class) = line
            .split_once('\t')
            .ok_or_else(|| Error::Dataset(format!("classes.tsv line {}: expected <stem>\\t<class>", lineno + 1)))?;
        let class_label = class
            .trim()
            .parse()
            .map_err(|_| Error::Dataset(format!("classes.tsv line {}: bad class id {class:?}", lineno + 1)))?;
        let cap_path = captions_dir.join(format!("{stem}.txt"));
        let bytes = fs::read(&cap_path).map_err(|e| Error::io(&cap_path, e))?;
        let text = String::from_utf8(bytes).map_err(|e| Error::Encoding(format!("{}: {e}", cap_path.display())))?;
        let captions: Vec<String> = text.lines().filter(|l| !l.trim().is_empty()).map(str::to_string).collect();
        if captions.len() != captions_per_image {
            return Err(Error::Dataset(format!(
                "{} has {} captions, expected {captions_per_image}",
                cap_path.display(),
                captions.len()
            )));
        }
        let image_path = images_dir.join(format!("{stem}.ppm"));
        if !image_path.is_file() {
            return Err(Error::io(
                &image_path,
                std::io::Error::new(std::io::ErrorKind::NotFound, "image not found"),
            ));
        }
        records.push(RawRecord {
            stem: stem.to_string(),
            image_path,
            captions,
            class_label,
        });
    }
    if records.is_empty() {
        return Err(Error::Dataset(format!("{} lists no images", classes_path.display())));
    }
    records.sort_by(|a, b| a.stem.cmp(&b.stem));
    Ok(records)
}

/// Writes the on-disk layout: `images/`, `captions/` (LF, one caption per
/// line) and `classes.tsv`.
pub fn write_dataset(dir: &Path, records: &[(RawRecord, RgbImage)]) -> Result<()> {
    let images_dir = dir.join("images");
    let captions_dir = dir.join("captions");
    for d in [&images_dir, &captions_dir] {
        fs::create_dir_all(d).map_err(|e| Error::io(d.as_path(), e))?;
    }
    let mut classes = String::new();
    for (rec, img) in records {
        img.save(&images_dir.join(format!("{}.ppm", rec.stem)))?;
        let mut text = rec.captions.join("\n");
        text.push('\n');
        let p = captions_dir.join(format!("{}.txt", rec.stem));
        fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
        classes.push_str(&format!("{}\t{}\n", rec.stem, rec.class_label));
    }
    let p = dir.join("classes.tsv");
    fs::write(&p, classes).map_err(|e| Error::io(&p, e))
}

/// Tokenized captions of every record, in order (for vocabulary building).
pub fn corpus_tokens(records: &[RawRecord]) -> Result<Vec<Vec<String>>> {
    let mut out = Vec::new();
    for r in records {
        for c in &r.captions {
            out.push(tokenize_bytes(c.as_bytes())?);
        }
    }
    Ok(out)
}

/// Tokenizes and encodes every caption and decodes every image.
pub fn prepare_examples(records: &[RawRecord], vocab: &Vocabulary, max_len: usize) -> Result<Vec<Example>> {
    records
        .iter()
        .map(|r| {
            let captions = r
                .captions
                .iter()
                .map(|c| encode_caption(vocab, &tokenize_bytes(c.as_bytes())?, max_len))
                .collect::<Result<Vec<_>>>()?;
            Ok(Example {
                record: CaptionRecord {
                    image_path: r.image_path.to_string_lossy().into_owned(),
                    captions,
                    class_label: r.class_label,
                },
                image: RgbImage::load(&r.image_path)?,
            })
        })
        .collect()
}

/// Seeded shuffle, then the first `round(train_fraction · N)` records go to
/// train and the rest to test. Both sides keep input order.
pub fn split_dataset<R: Clone>(records: &[R], train_fraction: f64, seed: u64) -> Result<DatasetSplit<R>> {
    if records.len() < 2 {
        return Err(Error::Dataset(format!("need at least 2 records to split, got {}", records.len())));
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Dataset(format!("train fraction {train_fraction} outside (0, 1)")));
    }
    let n = records.len();
    let n_train = ((train_fraction * n as f64).round() as usize).clamp(1, n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    RngStream::new(seed, "split").shuffle(&mut order);
    let mut in_train = vec![false; n];
    for &i in &order[..n_train] {
        in_train[i] = true;
    }
    let (mut train, mut test) = (Vec::with_capacity(n_train), Vec::with_capacity(n - n_train));
    for (i, r) in records.iter().enumerate() {
        if in_train[i] {
            train.push(r.clone());
        } else {
            test.push(r.clone());
        }
    }
    Ok(DatasetSplit {
        train,
        test,
        ratio: (train_fraction, 1.0 - train_fraction),
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashSet;

    fn fake(n: usize) -> Vec<CaptionRecord> {
        (0..n)
            .map(|i| CaptionRecord {
                image_path: format!("images/{i:05}.ppm"),
                captions: Vec::new(),
                class_label: i % 200,
            })
            .collect()
    }

    #[test]
    fn hundred_records_split_seventy_thirty() {
        let s = split_dataset(&fake(100), 0.70, 3).unwrap();
        assert_eq!((s.train.len(), s.test.len()), (70, 30));
    }

    #[test]
    fn split_is_seeded() {
        let recs = fake(50);
        let paths = |v: &[CaptionRecord]| v.iter().map(|r| r.image_path.clone()).collect::<Vec<_>>();
        let a = split_dataset(&recs, 0.7, 1).unwrap();
        let b = split_dataset(&recs, 0.7, 1).unwrap();
        let c = split_dataset(&recs, 0.7, 2).unwrap();
        assert_eq!(paths(&a.train), paths(&b.train));
        assert_ne!(paths(&a.train), paths(&c.train));
        assert_eq!(a.train.len(), c.train.len());
    }

    #[test]
    fn split_errors() {
        assert!(matches!(split_dataset(&fake(1), 0.7, 0), Err(Error::Dataset(_))));
        assert!(split_dataset(&fake(10), 1.0, 0).is_err());
        assert!(split_dataset(&fake(10), 0.0, 0).is_err());
    }

    proptest! {
        #[test]
        fn split_partitions_exactly(n in 2usize..400, frac in 0.05f64..0.95, seed in any::<u64>()) {
            let recs = fake(n);
            let s = split_dataset(&recs, frac, seed).unwrap();
            prop_assert_eq!(s.train.len() + s.test.len(), n);
            let expected = ((frac * n as f64).round() as usize).clamp(1, n - 1);
            prop_assert_eq!(s.train.len(), expected);
            let a: HashSet<_> = s.train.iter().map(|r| r.image_path.clone()).collect();
            let b: HashSet<_> = s.test.iter().map(|r| r.image_path.clone()).collect();
            prop_assert_eq!(a.len(), s.train.len());
            prop_assert!(a.is_disjoint(&b));
            prop_assert_eq!(a.len() + b.len(), n);
        }
    }

    #[test]
    fn missing_captions_dir_names_path() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir_all(dir.path().join("images")).unwrap();
        match load_raw_dataset(dir.path(), 10) {
            Err(Error::Io { path, .. }) => assert!(path.ends_with("captions")),
            other => panic!("expected I/O error, got {other:?}"),
        }
    }
}
