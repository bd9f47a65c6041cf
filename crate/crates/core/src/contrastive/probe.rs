use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::augment::Image;
use crate::contrastive::Encoder;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::numeric::{Graph, ParamSet, Sgd, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Random crops cached per training image; one is drawn per visit.
    pub crops_per_image: usize,
    /// Maximum shift of the random crop; exposed borders replicate edges.
    pub pad: usize,
    /// Classifier initialization std.
    pub init_std: f64,
    /// Seeds `0..seeds` are probed and averaged by the harness.
    pub seeds: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 256,
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 0.0,
            crops_per_image: 4,
            pad: 4,
            init_std: 0.01,
            seeds: 5,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.crops_per_image == 0 || self.seeds == 0 {
            return Err(Error::Config("probe epochs, batch_size, crops and seeds must be >= 1".into()));
        }
        if !(self.lr > 0.0)
            || !(0.0..1.0).contains(&self.momentum)
            || self.weight_decay < 0.0
            || !(self.init_std >= 0.0)
        {
            return Err(Error::Config("invalid probe optimizer settings".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub seed: u64,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub classes: usize,
}

/// Shifts by up to `pad` pixels in each direction, replicating edge pixels
/// into the exposed border, so the crop has the original size.
pub fn random_crop<R: Rng + ?Sized>(img: &Image, pad: usize, rng: &mut R) -> Image {
    let (w, h) = (img.width(), img.height());
    let dx = rng.random_range(0..=2 * pad) as isize - pad as isize;
    let dy = rng.random_range(0..=2 * pad) as isize - pad as isize;
    let mut out = Image::filled(w, h, [0, 0, 0]);
    for y in 0..h {
        let sy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
        for x in 0..w {
            let sx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
            out.put(x, y, img.get(sx, sy));
        }
    }
    out
}

const FEATURE_CHUNK: usize = 128;

fn features_of(encoder: &Encoder, images: &[Image]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(images.len() * encoder.feature_dim());
    for chunk in images.chunks(FEATURE_CHUNK) {
        out.extend(encoder.features(chunk)?);
    }
    Ok(out)
}

fn labels_of(ds: &Dataset) -> Result<&[u8]> {
    ds.labels()
        .ok_or_else(|| Error::Config(format!("dataset `{}` has no labels", ds.name)))
}

/// Trains a softmax classifier on frozen backbone features and reports
/// accuracy on `test`. Features are standardized with training statistics.
pub fn linear_probe(
    encoder: &Encoder,
    train: &Dataset,
    test: &Dataset,
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<ProbeReport> {
    cfg.validate()?;
    let (ytr, yte) = (labels_of(train)?, labels_of(test)?);
    if train.is_empty() || test.is_empty() {
        return Err(Error::Config("probe needs non-empty train and test sets".into()));
    }
    let mut seen: Vec<u8> = ytr.to_vec();
    seen.sort_unstable();
    seen.dedup();
    if seen.len() < 2 {
        return Err(Error::Config("probe needs at least two classes in the training set".into()));
    }
    let classes = train.num_classes().max(test.num_classes());
    let d = encoder.feature_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // crop c of image i lives at row c * n + i
    let n = train.len();
    let mut crops = Vec::with_capacity(n * cfg.crops_per_image);
    for _ in 0..cfg.crops_per_image {
        crops.extend(train.images().iter().map(|img| random_crop(img, cfg.pad, &mut rng)));
    }
    let mut xtr = features_of(encoder, &crops)?;
    let mut xte = features_of(encoder, test.images())?;
    let rows = crops.len() as f64;
    let mut mean = vec![0.0; d];
    let mut var = vec![0.0; d];
    for row in xtr.chunks(d) {
        row.iter().zip(&mut mean).for_each(|(v, m)| *m += v / rows);
    }
    for row in xtr.chunks(d) {
        for j in 0..d {
            var[j] += (row[j] - mean[j]).powi(2) / rows;
        }
    }
    let inv: Vec<f64> = var.iter().map(|v| 1.0 / v.sqrt().max(1e-6)).collect();
    for x in [&mut xtr, &mut xte] {
        for row in x.chunks_mut(d) {
            for j in 0..d {
                row[j] = (row[j] - mean[j]) * inv[j];
            }
        }
    }

    let mut params = ParamSet::new();
    let w = params.add(
        "probe.w",
        Tensor::from_fn(&[d, classes], |_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            cfg.init_std * z
        }),
    );
    let b = params.add("probe.b", Tensor::zeros(&[classes]));
    let mut opt = Sgd::new(cfg.momentum, cfg.weight_decay);
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let total = (cfg.epochs * steps_per_epoch) as f64;
    let mut order: Vec<usize> = (0..n).collect();
    let mut step = 0usize;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for idx in order.chunks(cfg.batch_size) {
            let mut x = Vec::with_capacity(idx.len() * d);
            let mut y = Vec::with_capacity(idx.len());
            for &i in idx {
                let row = rng.random_range(0..cfg.crops_per_image) * n + i;
                x.extend_from_slice(&xtr[row * d..(row + 1) * d]);
                y.push(ytr[i] as usize);
            }
            let mut g = Graph::new();
            let xv = g.constant_raw(vec![idx.len(), d], x);
            let wv = g.param(&params, w);
            let bv = g.param(&params, b);
            let logits = g.matmul(xv, wv)?;
            let logits = g.add(logits, bv)?;
            let lsm = g.log_softmax(logits);
            let picked = g.gather(lsm, &y)?;
            let m = g.mean(picked);
            let loss = g.scale(m, -1.0);
            g.backward(loss)?;
            g.write_param_grads(&mut params);
            let lr = cfg.lr * 0.5 * (1.0 + (PI * step as f64 / total).cos());
            opt.step(&mut params, lr)?;
            step += 1;
        }
    }
    if !params.all_finite() {
        return Err(Error::NonFinite("probe weights".into()));
    }

    let accuracy = |x: &[f64], y: &[u8]| -> Result<f64> {
        let mut g = Graph::inference();
        let xv = g.constant_raw(vec![y.len(), d], x.to_vec());
        let wv = g.param(&params, w);
        let bv = g.param(&params, b);
        let logits = g.matmul(xv, wv)?;
        let logits = g.add(logits, bv)?;
        let correct = g
            .value(logits)
            .chunks(classes)
            .zip(y)
            .filter(|(row, &label)| {
                let best = (0..classes)
                    .max_by(|&a, &c| row[a].total_cmp(&row[c]).then(c.cmp(&a)))
                    .unwrap_or(0);
                best == label as usize
            })
            .count();
        Ok(correct as f64 / y.len() as f64)
    };
    let uncropped = features_of(encoder, train.images())?;
    let mut xtr_plain = uncropped;
    for row in xtr_plain.chunks_mut(d) {
        for j in 0..d {
            row[j] = (row[j] - mean[j]) * inv[j];
        }
    }
    Ok(ProbeReport {
        seed,
        train_accuracy: accuracy(&xtr_plain, ytr)?,
        test_accuracy: accuracy(&xte, yte)?,
        classes,
    })
}
