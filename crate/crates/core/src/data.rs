//! CIFAR-10 binary ingestion, a synthetic shapes dataset, and seeded batching.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::Image;
use crate::error::{Error, Result};

pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_RECORD: usize = 1 + 3 * CIFAR_SIDE * CIFAR_SIDE;
pub const CIFAR_CLASSES: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            _ => Err(Error::Parse(format!("unknown split `{s}`"))),
        }
    }
}

/// Immutable image collection; `labels`, when present, align with `images`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub split: Split,
    images: Vec<Image>,
    labels: Option<Vec<u8>>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, split: Split, images: Vec<Image>, labels: Option<Vec<u8>>) -> Result<Self> {
        if let Some(l) = &labels {
            if l.len() != images.len() {
                return Err(Error::OutOfRange(format!(
                    "{} labels for {} images",
                    l.len(),
                    images.len()
                )));
            }
        }
        Ok(Self {
            name: name.into(),
            split,
            images,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn images(&self) -> &[Image] {
        &self.images
    }

    pub fn image(&self, i: usize) -> &Image {
        &self.images[i]
    }

    pub fn labels(&self) -> Option<&[u8]> {
        self.labels.as_deref()
    }

    pub fn num_classes(&self) -> usize {
        self.labels
            .as_ref()
            .and_then(|l| l.iter().max())
            .map_or(0, |&m| m as usize + 1)
    }

    /// Items at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            name: self.name.clone(),
            split: self.split,
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            labels: self
                .labels
                .as_ref()
                .map(|l| indices.iter().map(|&i| l[i]).collect()),
        }
    }

    /// Deterministic subset of `⌊fraction·n⌋` items, kept in original order.
    pub fn fraction(&self, fraction: f64, seed: u64) -> Result<Self> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::OutOfRange(format!("fraction {fraction} not in (0, 1]")));
        }
        let k = (fraction * self.len() as f64).floor() as usize;
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        idx.truncate(k);
        idx.sort_unstable();
        Ok(self.subset(&idx))
    }

    /// Seeded split into `(first, rest)` with `⌊frac·n⌋` items in `first`.
    pub fn split_holdout(&self, frac: f64, seed: u64) -> (Self, Self) {
        let k = (frac * self.len() as f64).floor() as usize;
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let (a, b) = idx.split_at(k);
        let (mut a, mut b) = (a.to_vec(), b.to_vec());
        a.sort_unstable();
        b.sort_unstable();
        (self.subset(&a), self.subset(&b))
    }
}

/// Parses one CIFAR-10 binary batch file.
pub fn parse_cifar10(bytes: &[u8], path: &Path) -> Result<(Vec<Image>, Vec<u8>)> {
    if bytes.len() % CIFAR_RECORD != 0 {
        let whole = bytes.len() / CIFAR_RECORD;
        return Err(Error::Dataset {
            path: path.to_path_buf(),
            offset: (whole * CIFAR_RECORD) as u64,
            reason: format!(
                "truncated record: {} trailing bytes, records are {CIFAR_RECORD} bytes",
                bytes.len() - whole * CIFAR_RECORD
            ),
        });
    }
    let mut images = Vec::with_capacity(bytes.len() / CIFAR_RECORD);
    let mut labels = Vec::with_capacity(images.capacity());
    for (r, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        if rec[0] as usize >= CIFAR_CLASSES {
            return Err(Error::Dataset {
                path: path.to_path_buf(),
                offset: (r * CIFAR_RECORD) as u64,
                reason: format!("label {} not in 0..10", rec[0]),
            });
        }
        labels.push(rec[0]);
        images.push(Image::from_planar(CIFAR_SIDE, CIFAR_SIDE, &rec[1..])?);
    }
    Ok((images, labels))
}

pub fn cifar10_files(dir: &Path, split: Split) -> Vec<PathBuf> {
    match split {
        Split::Train => (1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).collect(),
        Split::Test => vec![dir.join("test_batch.bin")],
    }
}

/// Loads the standard binary batches from `dir`, optionally keeping a
/// seeded `fraction` of the records.
pub fn load_cifar10(dir: &Path, split: Split, fraction: f64, seed: u64) -> Result<Dataset> {
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for path in cifar10_files(dir, split) {
        let bytes = std::fs::read(&path).map_err(|e| Error::Dataset {
            path: path.clone(),
            offset: 0,
            reason: e.to_string(),
        })?;
        let (im, lb) = parse_cifar10(&bytes, &path)?;
        images.extend(im);
        labels.extend(lb);
    }
    let ds = Dataset::new("cifar10", split, images, Some(labels))?;
    if fraction < 1.0 {
        ds.fraction(fraction, seed)
    } else {
        Ok(ds)
    }
}

/// Shape drawn for each class of [`synth_shapes`], in class order.
/// Earlier classes are the most separable: the two-class set is a solid disc
/// against a checkered square.
pub const SHAPES: [&str; 7] = ["disc", "checker", "square", "stripes", "ring", "triangle", "cross"];

/// `n` 32×32 images of one colored shape on a flat background; the label is
/// the shape kind and class `i % classes` is assigned to image `i`.
pub fn synth_shapes(n: usize, classes: usize, seed: u64) -> Result<Dataset> {
    if classes == 0 || classes > SHAPES.len() || n < classes {
        return Err(Error::OutOfRange(format!(
            "synth_shapes needs 1 <= classes <= {} <= n, got classes {classes}, n {n}",
            SHAPES.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let side = CIFAR_SIDE;
    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % classes;
        let bg: [u8; 3] = [rng.random(), rng.random(), rng.random()];
        let mut fg: [u8; 3];
        loop {
            fg = [rng.random(), rng.random(), rng.random()];
            let dist: i32 = fg.iter().zip(&bg).map(|(a, b)| (*a as i32 - *b as i32).abs()).sum();
            if dist > 150 {
                break;
            }
        }
        let r = rng.random_range(6.0..11.0f64);
        let cx = rng.random_range(r..side as f64 - r);
        let cy = rng.random_range(r..side as f64 - r);
        let mut img = Image::filled(side, side, bg);
        for y in 0..side {
            for x in 0..side {
                let dx = x as f64 + 0.5 - cx;
                let dy = y as f64 + 0.5 - cy;
                let cell = |v: f64, w: f64| ((v + r).floor() as i64).div_euclid(w as i64);
                let in_box = dx.abs() <= r * 0.9 && dy.abs() <= r * 0.9;
                let inside = match SHAPES[class] {
                    "disc" => dx * dx + dy * dy <= r * r,
                    "checker" => in_box && (cell(dx, 2.0) + cell(dy, 2.0)).rem_euclid(2) == 0,
                    "square" => dx.abs() <= r * 0.8 && dy.abs() <= r * 0.8,
                    "stripes" => in_box && cell(dy, 2.0).rem_euclid(2) == 0,
                    "ring" => {
                        let d2 = dx * dx + dy * dy;
                        d2 <= r * r && d2 >= (0.55 * r).powi(2)
                    }
                    "triangle" => dy <= r * 0.8 && dy >= -r && dx.abs() <= (dy + r) * 0.5,
                    _ => (dx.abs() <= r * 0.3 && dy.abs() <= r) || (dy.abs() <= r * 0.3 && dx.abs() <= r),
                };
                if inside {
                    img.put(x, y, fg);
                }
            }
        }
        images.push(img);
        labels.push(class as u8);
    }
    Dataset::new("synth", Split::Train, images, Some(labels))
}

/// Index batches for one epoch; the final short batch is dropped.
pub fn batches(n: usize, batch_size: usize, seed: u64, shuffle: bool) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 || batch_size > n {
        return Err(Error::OutOfRange(format!(
            "batch size {batch_size} must be in 1..={n}"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    if shuffle {
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    Ok(idx
        .chunks_exact(batch_size)
        .map(<[usize]>::to_vec)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(label: u8, fill: u8) -> Vec<u8> {
        let mut r = vec![label];
        r.extend(std::iter::repeat_n(fill, 3072));
        r
    }

    #[test]
    fn parse_records() {
        let mut bytes = record(3, 7);
        bytes.extend(record(9, 200));
        let (im, lb) = parse_cifar10(&bytes, Path::new("x.bin")).unwrap();
        assert_eq!(lb, vec![3, 9]);
        assert_eq!(im.len(), 2);
        assert_eq!(im[1].get(31, 31), [200, 200, 200]);
    }

    #[test]
    fn truncation_reports_offset() {
        let mut bytes = record(1, 1);
        bytes.extend(record(2, 2));
        bytes.truncate(CIFAR_RECORD + 100);
        match parse_cifar10(&bytes, Path::new("x.bin")) {
            Err(Error::Dataset { offset, .. }) => assert_eq!(offset, CIFAR_RECORD as u64),
            other => panic!("{other:?}"),
        }
        let mut bad = record(11, 0);
        bad.extend(record(0, 0));
        assert!(parse_cifar10(&bad, Path::new("x.bin")).is_err());
    }

    #[test]
    fn load_directory_and_fraction() {
        let dir = tempfile::tempdir().unwrap();
        let mut bytes = Vec::new();
        for i in 0..20u8 {
            bytes.extend(record(i % 10, i));
        }
        std::fs::write(dir.path().join("test_batch.bin"), &bytes).unwrap();
        let ds = load_cifar10(dir.path(), Split::Test, 1.0, 0).unwrap();
        assert_eq!(ds.len(), 20);
        assert!(ds.labels().unwrap().iter().all(|&l| l < 10));
        let a = load_cifar10(dir.path(), Split::Test, 0.25, 4).unwrap();
        let b = load_cifar10(dir.path(), Split::Test, 0.25, 4).unwrap();
        assert_eq!(a.len(), 5);
        assert_eq!(a, b);
        assert!(load_cifar10(dir.path(), Split::Train, 1.0, 0).is_err());
    }

    #[test]
    fn synth_is_deterministic_and_balanced() {
        let a = synth_shapes(101, 3, 9).unwrap();
        assert_eq!(a, synth_shapes(101, 3, 9).unwrap());
        assert_ne!(a, synth_shapes(101, 3, 10).unwrap());
        let mut hist = [0usize; 3];
        for &l in a.labels().unwrap() {
            hist[l as usize] += 1;
        }
        let (lo, hi) = (hist.iter().min().unwrap(), hist.iter().max().unwrap());
        assert!(hi - lo <= 1);
        assert_eq!(a.num_classes(), 3);
        assert_eq!(a.image(0).width(), 32);
        assert!(synth_shapes(2, 3, 0).is_err());
    }

    #[test]
    fn batching() {
        assert_eq!(batches(100, 32, 0, true).unwrap().len(), 3);
        assert_eq!(batches(100, 32, 5, true).unwrap(), batches(100, 32, 5, true).unwrap());
        assert_ne!(batches(100, 32, 5, true).unwrap(), batches(100, 32, 6, true).unwrap());
        let plain = batches(10, 4, 0, false).unwrap();
        assert_eq!(plain, vec![vec![0, 1, 2, 3], vec![4, 5, 6, 7]]);
        assert!(batches(3, 4, 0, false).is_err());
    }

    #[test]
    fn subsets() {
        let ds = synth_shapes(50, 2, 1).unwrap();
        let f = ds.fraction(0.3, 2).unwrap();
        assert_eq!(f.len(), 15);
        let (a, b) = ds.split_holdout(0.2, 3);
        assert_eq!((a.len(), b.len()), (10, 40));
        assert!(ds.fraction(0.0, 0).is_err());
    }
}
