//! Pixel-level implementations of the 16 operations.
//!
//! Geometric operations resample with nearest neighbour at pixel centres and
//! fill uncovered pixels with gray. Photometric blends round to the nearest
//! integer and clamp to `[0, 255]`.

use rand::Rng;

use crate::augment::image::{Image, CHANNELS};
use crate::augment::ops::{magnitude_value, MagnitudeMapping, OpKind, MAX_BIN};
use crate::augment::subpolicy::{Subpolicy, TransformStep};

pub const FILL: u8 = 128;

/// Applies one step: with probability `step.apply_prob` the operation runs at
/// the step's magnitude, otherwise the image is returned unchanged.
pub fn apply_transform<R: Rng + ?Sized>(img: &Image, step: &TransformStep, rng: &mut R) -> Image {
    apply_transform_with(img, step, MagnitudeMapping::default(), rng)
}

pub fn apply_transform_with<R: Rng + ?Sized>(
    img: &Image,
    step: &TransformStep,
    mapping: MagnitudeMapping,
    rng: &mut R,
) -> Image {
    if rng.random::<f64>() >= step.apply_prob {
        return img.clone();
    }
    let magnitude = resolve_magnitude(step.op, step.bin, mapping, rng);
    apply_op(img, step.op, magnitude, rng)
}

/// Applies the steps in order, each behind its own Bernoulli gate.
pub fn apply_subpolicy<R: Rng + ?Sized>(img: &Image, sp: &Subpolicy, rng: &mut R) -> Image {
    apply_subpolicy_with(img, sp, MagnitudeMapping::default(), rng)
}

pub fn apply_subpolicy_with<R: Rng + ?Sized>(
    img: &Image,
    sp: &Subpolicy,
    mapping: MagnitudeMapping,
    rng: &mut R,
) -> Image {
    let mut out = img.clone();
    for step in sp.steps() {
        out = apply_transform_with(&out, step, mapping, rng);
    }
    out
}

/// The magnitude actually used when a step fires. Under sign randomization,
/// signed ranges map bins onto `[0, max]` and draw the sign here.
pub fn resolve_magnitude<R: Rng + ?Sized>(
    op: OpKind,
    bin: u8,
    mapping: MagnitudeMapping,
    rng: &mut R,
) -> f64 {
    let bin = bin.min(MAX_BIN);
    match (op.range(), mapping) {
        (None, _) => 0.0,
        (Some((_, hi)), MagnitudeMapping::SignRandomized) if op.is_signed() => {
            let m = bin as f64 * hi / MAX_BIN as f64;
            if rng.random::<bool>() {
                m
            } else {
                -m
            }
        }
        _ => magnitude_value(op, bin)
            .expect("bin clamped")
            .expect("op has a range"),
    }
}

/// Runs `op` unconditionally at a concrete magnitude.
pub fn apply_op<R: Rng + ?Sized>(img: &Image, op: OpKind, magnitude: f64, rng: &mut R) -> Image {
    use OpKind::*;
    match op {
        ShearX => warp(img, |x, y| (x + magnitude * y, y)),
        ShearY => warp(img, |x, y| (x, y + magnitude * x)),
        TranslateX => {
            let dx = (magnitude * img.width() as f64).round();
            warp(img, |x, y| (x + dx, y))
        }
        TranslateY => {
            let dy = (magnitude * img.height() as f64).round();
            warp(img, |x, y| (x, y + dy))
        }
        Rotate => rotate(img, magnitude),
        AutoContrast => per_channel_lut(img, autocontrast_lut),
        Invert => map_bytes(img, |p| 255 - p),
        Equalize => per_channel_lut(img, equalize_lut),
        Solarize => map_bytes(img, |p| if p as f64 >= magnitude { 255 - p } else { p }),
        Posterize => {
            let bits = magnitude.round().clamp(4.0, 8.0) as u32;
            let mask = (0xFFu32 << (8 - bits)) as u8;
            map_bytes(img, |p| p & mask)
        }
        Contrast => {
            let mean = {
                let n = (img.width() * img.height()) as f64;
                let total: f64 = (0..img.height())
                    .flat_map(|y| (0..img.width()).map(move |x| (x, y)))
                    .map(|(x, y)| luma(img.get(x, y)) as f64)
                    .sum();
                (total / n + 0.5).floor()
            };
            let degenerate = Image::filled(img.width(), img.height(), [mean as u8; 3]);
            blend(&degenerate, img, magnitude)
        }
        Color => {
            let mut gray = img.clone();
            for y in 0..img.height() {
                for x in 0..img.width() {
                    let l = luma(img.get(x, y));
                    gray.put(x, y, [l; 3]);
                }
            }
            blend(&gray, img, magnitude)
        }
        Brightness => {
            let black = Image::filled(img.width(), img.height(), [0; 3]);
            blend(&black, img, magnitude)
        }
        Sharpness => blend(&smooth(img), img, magnitude),
        Cutout => cutout(img, magnitude, rng),
        Identity => img.clone(),
    }
}

/// ITU-R 601-2 luma, as in PIL's `L` conversion.
fn luma([r, g, b]: [u8; 3]) -> u8 {
    ((r as u32 * 299 + g as u32 * 587 + b as u32 * 114) / 1000) as u8
}

fn map_bytes(img: &Image, f: impl Fn(u8) -> u8) -> Image {
    let mut out = img.clone();
    out.pixels_mut().iter_mut().for_each(|p| *p = f(*p));
    out
}

/// `degenerate + factor·(img − degenerate)`, rounded and clamped.
fn blend(degenerate: &Image, img: &Image, factor: f64) -> Image {
    let mut out = img.clone();
    for (o, (d, p)) in out
        .pixels_mut()
        .iter_mut()
        .zip(degenerate.pixels().iter().zip(img.pixels()))
    {
        let v = *d as f64 + factor * (*p as f64 - *d as f64);
        *o = v.round().clamp(0.0, 255.0) as u8;
    }
    out
}

/// Nearest-neighbour inverse warp: `src(x, y)` maps an output pixel centre
/// to a source position.
fn warp(img: &Image, src: impl Fn(f64, f64) -> (f64, f64)) -> Image {
    let (w, h) = (img.width(), img.height());
    let mut out = Image::filled(w, h, [FILL; 3]);
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = src(x as f64 + 0.5, y as f64 + 0.5);
            let (fx, fy) = (sx.floor(), sy.floor());
            if fx >= 0.0 && fy >= 0.0 && (fx as usize) < w && (fy as usize) < h {
                out.put(x, y, img.get(fx as usize, fy as usize));
            }
        }
    }
    out
}

fn rotate(img: &Image, degrees: f64) -> Image {
    let theta = degrees.to_radians();
    let (s, c) = theta.sin_cos();
    let cx = img.width() as f64 / 2.0;
    let cy = img.height() as f64 / 2.0;
    warp(img, |x, y| {
        let (u, v) = (x - cx, y - cy);
        (cx + (c * u + s * v), cy + (c * v - s * u))
    })
}

fn per_channel_lut(img: &Image, lut_for: impl Fn(&[u32; 256], usize) -> [u8; 256]) -> Image {
    let mut out = img.clone();
    let n = img.width() * img.height();
    for ch in 0..CHANNELS {
        let mut hist = [0u32; 256];
        for i in 0..n {
            hist[img.pixels()[i * CHANNELS + ch] as usize] += 1;
        }
        let lut = lut_for(&hist, n);
        let px = out.pixels_mut();
        for i in 0..n {
            px[i * CHANNELS + ch] = lut[px[i * CHANNELS + ch] as usize];
        }
    }
    out
}

fn identity_lut() -> [u8; 256] {
    std::array::from_fn(|i| i as u8)
}

fn autocontrast_lut(hist: &[u32; 256], _n: usize) -> [u8; 256] {
    let lo = hist.iter().position(|&c| c > 0);
    let hi = hist.iter().rposition(|&c| c > 0);
    match (lo, hi) {
        (Some(lo), Some(hi)) if hi > lo => {
            let scale = 255.0 / (hi - lo) as f64;
            std::array::from_fn(|i| ((i as f64 - lo as f64) * scale).round().clamp(0.0, 255.0) as u8)
        }
        _ => identity_lut(),
    }
}

fn equalize_lut(hist: &[u32; 256], n: usize) -> [u8; 256] {
    let last = hist.iter().rev().find(|&&c| c > 0).copied().unwrap_or(0) as usize;
    let step = (n - last) / 255;
    if step == 0 {
        return identity_lut();
    }
    let mut acc = step / 2;
    std::array::from_fn(|i| {
        let v = (acc / step).min(255) as u8;
        acc += hist[i] as usize;
        v
    })
}

/// 3×3 smoothing kernel `[[1,1,1],[1,5,1],[1,1,1]] / 13`; border pixels are kept.
fn smooth(img: &Image) -> Image {
    let (w, h) = (img.width(), img.height());
    let mut out = img.clone();
    if w < 3 || h < 3 {
        return out;
    }
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let mut acc = [0u32; 3];
            for dy in 0..3 {
                for dx in 0..3 {
                    let weight = if dx == 1 && dy == 1 { 5 } else { 1 };
                    let p = img.get(x + dx - 1, y + dy - 1);
                    for c in 0..3 {
                        acc[c] += weight * p[c] as u32;
                    }
                }
            }
            out.put(x, y, acc.map(|a| ((a as f64 / 13.0).round()) as u8));
        }
    }
    out
}

/// Gray square of side `round(fraction · min(w, h))`, placed fully inside.
fn cutout<R: Rng + ?Sized>(img: &Image, fraction: f64, rng: &mut R) -> Image {
    let (w, h) = (img.width(), img.height());
    let side = (fraction * w.min(h) as f64).round() as usize;
    if side == 0 {
        return img.clone();
    }
    let x0 = rng.random_range(0..=w - side);
    let y0 = rng.random_range(0..=h - side);
    let mut out = img.clone();
    for y in y0..y0 + side {
        for x in x0..x0 + side {
            out.put(x, y, [FILL; 3]);
        }
    }
    out
}
