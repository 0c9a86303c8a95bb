//! Image-only mixing augmentations for side-by-side comparison: MixUp,
//! CutOut, CutMix and their cow-mask variants.

use image::RgbImage;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Mask;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl Rect {
    fn check(&self, width: u32, height: u32) -> Result<()> {
        if self.x + self.w > width as usize || self.y + self.h > height as usize {
            return Err(Error::OutOfBounds(format!(
                "rect {}x{}+{}+{} outside {width}x{height}",
                self.w, self.h, self.x, self.y
            )));
        }
        Ok(())
    }

    fn contains(&self, x: u32, y: u32) -> bool {
        let (x, y) = (x as usize, y as usize);
        x >= self.x && x < self.x + self.w && y >= self.y && y < self.y + self.h
    }

    /// Uniformly placed rectangle covering about `area_fraction` of the image.
    pub fn random<R: Rng + ?Sized>(width: u32, height: u32, area_fraction: f64, rng: &mut R) -> Rect {
        let side = area_fraction.clamp(0.0, 1.0).sqrt();
        let w = ((width as f64 * side).round() as usize).min(width as usize);
        let h = ((height as f64 * side).round() as usize).min(height as usize);
        Rect {
            x: rng.random_range(0..=width as usize - w),
            y: rng.random_range(0..=height as usize - h),
            w,
            h,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum MixMethod {
    Mixup,
    Cutout,
    Cutmix,
    Cowout,
    Cowmix,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MixConfig {
    pub method: MixMethod,
    /// Weight of the first image in MixUp; area fraction of random rectangles.
    pub mix_weight: f64,
    /// `None` draws a random rectangle.
    pub rect: Option<Rect>,
    pub cow_sigma: f64,
    /// Fraction of pixels selected by a cow mask.
    pub cow_p: f64,
}

impl Default for MixConfig {
    fn default() -> Self {
        MixConfig {
            method: MixMethod::Cutmix,
            mix_weight: 0.5,
            rect: None,
            cow_sigma: 8.0,
            cow_p: 0.5,
        }
    }
}

impl MixConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.mix_weight) {
            return Err(Error::InvalidConfig(format!("mix_weight {} outside [0, 1]", self.mix_weight)));
        }
        if !(self.cow_p > 0.0 && self.cow_p < 1.0) {
            return Err(Error::InvalidConfig(format!("cow_p {} outside (0, 1)", self.cow_p)));
        }
        if !(self.cow_sigma > 0.0) {
            return Err(Error::InvalidConfig(format!("cow_sigma {} must be > 0", self.cow_sigma)));
        }
        Ok(())
    }
}

fn same_extent(a: &RgbImage, b: &RgbImage) -> Result<()> {
    if a.dimensions() != b.dimensions() {
        return Err(Error::DimensionMismatch(format!(
            "{:?} vs {:?}",
            a.dimensions(),
            b.dimensions()
        )));
    }
    Ok(())
}

/// `weight * a + (1 - weight) * b`, rounded half up.
pub fn mixup(a: &RgbImage, b: &RgbImage, weight: f64) -> Result<RgbImage> {
    same_extent(a, b)?;
    let mut out = a.clone();
    for (o, (&x, &y)) in out.iter_mut().zip(a.iter().zip(b.iter())) {
        *o = (weight * x as f64 + (1.0 - weight) * y as f64 + 0.5).floor().clamp(0.0, 255.0) as u8;
    }
    Ok(out)
}

pub fn cutout(a: &RgbImage, rect: Rect) -> Result<RgbImage> {
    rect.check(a.width(), a.height())?;
    let mut out = a.clone();
    for (x, y, p) in out.enumerate_pixels_mut() {
        if rect.contains(x, y) {
            p.0 = [0; 3];
        }
    }
    Ok(out)
}

pub fn cutmix(a: &RgbImage, b: &RgbImage, rect: Rect) -> Result<RgbImage> {
    same_extent(a, b)?;
    rect.check(a.width(), a.height())?;
    let mut out = a.clone();
    for (x, y, p) in out.enumerate_pixels_mut() {
        if rect.contains(x, y) {
            *p = *b.get_pixel(x, y);
        }
    }
    Ok(out)
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as i64;
    let k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// One separable pass along rows (`horizontal`) or columns, edges clamped.
fn blur_pass(src: &[f64], w: usize, h: usize, k: &[f64], horizontal: bool) -> Vec<f64> {
    let r = (k.len() / 2) as i64;
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(i, kv)| {
                    let d = i as i64 - r;
                    let (sx, sy) = if horizontal {
                        ((x as i64 + d).clamp(0, w as i64 - 1) as usize, y)
                    } else {
                        (x, (y as i64 + d).clamp(0, h as i64 - 1) as usize)
                    };
                    kv * src[sy * w + sx]
                })
                .sum();
        }
    }
    out
}

/// Gaussian-smoothed white noise; the `round(p * n)` smallest values are set.
pub fn cow_mask<R: Rng + ?Sized>(width: usize, height: usize, sigma: f64, p: f64, rng: &mut R) -> Result<Mask> {
    if !(sigma > 0.0) {
        return Err(Error::InvalidConfig(format!("cow_sigma {sigma} must be > 0")));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidConfig(format!("cow_p {p} outside [0, 1]")));
    }
    let n = width * height;
    let noise: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    let k = gaussian_kernel(sigma);
    let smooth = blur_pass(&blur_pass(&noise, width, height, &k, true), width, height, &k, false);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| smooth[i].total_cmp(&smooth[j]).then(i.cmp(&j)));
    let keep = ((p * n as f64).round() as usize).min(n);
    let mut bits = vec![false; n];
    for &i in &order[..keep] {
        bits[i] = true;
    }
    Ok(Mask::from_bits(width, height, bits))
}

fn check_mask(a: &RgbImage, m: &Mask) -> Result<()> {
    if (m.width(), m.height()) != (a.width() as usize, a.height() as usize) {
        return Err(Error::DimensionMismatch(format!(
            "mask {}x{} vs image {:?}",
            m.width(),
            m.height(),
            a.dimensions()
        )));
    }
    Ok(())
}

/// Zeroes the pixels under `m`.
pub fn cowout(a: &RgbImage, m: &Mask) -> Result<RgbImage> {
    check_mask(a, m)?;
    let mut out = a.clone();
    for (x, y, p) in out.enumerate_pixels_mut() {
        if m.get(x as usize, y as usize) {
            p.0 = [0; 3];
        }
    }
    Ok(out)
}

/// Pixels from `b` under `m`, from `a` elsewhere.
pub fn cowmix(a: &RgbImage, b: &RgbImage, m: &Mask) -> Result<RgbImage> {
    same_extent(a, b)?;
    check_mask(a, m)?;
    let mut out = a.clone();
    for (x, y, p) in out.enumerate_pixels_mut() {
        if m.get(x as usize, y as usize) {
            *p = *b.get_pixel(x, y);
        }
    }
    Ok(out)
}

/// Runs the configured method; `b` is ignored by the single-image methods.
pub fn apply_mix<R: Rng + ?Sized>(a: &RgbImage, b: &RgbImage, cfg: &MixConfig, rng: &mut R) -> Result<RgbImage> {
    cfg.validate()?;
    let rect = |rng: &mut R| cfg.rect.unwrap_or_else(|| Rect::random(a.width(), a.height(), cfg.mix_weight, rng));
    let cow = |rng: &mut R| cow_mask(a.width() as usize, a.height() as usize, cfg.cow_sigma, cfg.cow_p, rng);
    match cfg.method {
        MixMethod::Mixup => mixup(a, b, cfg.mix_weight),
        MixMethod::Cutout => cutout(a, rect(rng)),
        MixMethod::Cutmix => cutmix(a, b, rect(rng)),
        MixMethod::Cowout => cowout(a, &cow(rng)?),
        MixMethod::Cowmix => cowmix(a, b, &cow(rng)?),
    }
}
