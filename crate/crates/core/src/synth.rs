//! Procedural stained-tissue look-alikes: textured backgrounds scattered with
//! non-overlapping elliptical nuclei. Used for tests, examples and smoke runs.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::dataset::LabeledImage;
use crate::rng;

/// Background and nucleus colours of one staining style.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Palette {
    pub background: [f64; 3],
    pub nucleus: [f64; 3],
}

pub const PALETTES: [Palette; 2] = [
    Palette {
        background: [232.0, 190.0, 214.0],
        nucleus: [92.0, 48.0, 140.0],
    },
    Palette {
        background: [214.0, 200.0, 180.0],
        nucleus: [120.0, 70.0, 60.0],
    },
];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthConfig {
    pub width: usize,
    pub height: usize,
    pub nuclei: usize,
    /// Semi-axis range in pixels.
    pub radius: (f64, f64),
    /// Per-pixel colour noise standard deviation.
    pub noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            width: 64,
            height: 64,
            nuclei: 6,
            radius: (3.0, 7.0),
            noise: 6.0,
        }
    }
}

fn clamp_byte(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// One image. Nuclei that cannot be placed without touching an earlier one
/// after a bounded number of tries are skipped.
pub fn synth_image<R: Rng + ?Sized>(id: &str, cfg: &SynthConfig, palette: &Palette, rng: &mut R) -> LabeledImage {
    let (w, h) = (cfg.width, cfg.height);
    let noise = Normal::new(0.0, cfg.noise.max(1e-9)).expect("positive std");
    let tilt = [rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3)];
    let mut pixels = vec![0u8; w * h * 3];
    for y in 0..h {
        for x in 0..w {
            let shade = tilt[0] * x as f64 + tilt[1] * y as f64;
            for c in 0..3 {
                pixels[(y * w + x) * 3 + c] = clamp_byte(palette.background[c] + shade + noise.sample(rng));
            }
        }
    }
    let mut labels = vec![0u16; w * h];
    let mut next = 1u16;
    for _ in 0..cfg.nuclei {
        for _ in 0..100 {
            let a = rng.random_range(cfg.radius.0..=cfg.radius.1);
            let b = rng.random_range(cfg.radius.0..=cfg.radius.1);
            let theta = rng.random_range(0.0..std::f64::consts::PI);
            let reach = a.max(b) + 1.0;
            if 2.0 * reach >= w as f64 || 2.0 * reach >= h as f64 {
                break;
            }
            let cx = rng.random_range(reach..w as f64 - reach);
            let cy = rng.random_range(reach..h as f64 - reach);
            let (s, co) = theta.sin_cos();
            let inside = |x: f64, y: f64, grow: f64| {
                let (dx, dy) = (x - cx, y - cy);
                let u = (dx * co + dy * s) / (a + grow);
                let v = (-dx * s + dy * co) / (b + grow);
                u * u + v * v <= 1.0
            };
            let (x0, x1) = ((cx - reach - 1.0).max(0.0) as usize, ((cx + reach + 1.0) as usize).min(w - 1));
            let (y0, y1) = ((cy - reach - 1.0).max(0.0) as usize, ((cy + reach + 1.0) as usize).min(h - 1));
            let clash = (y0..=y1)
                .flat_map(|y| (x0..=x1).map(move |x| (x, y)))
                .any(|(x, y)| labels[y * w + x] != 0 && inside(x as f64, y as f64, 1.5));
            if clash {
                continue;
            }
            let tint: Vec<f64> = (0..3).map(|_| rng.random_range(-15.0..15.0)).collect();
            let mut area = 0;
            for y in y0..=y1 {
                for x in x0..=x1 {
                    if inside(x as f64, y as f64, 0.0) {
                        labels[y * w + x] = next;
                        area += 1;
                        for c in 0..3 {
                            let v = palette.nucleus[c] + tint[c] + noise.sample(rng);
                            pixels[(y * w + x) * 3 + c] = clamp_byte(v);
                        }
                    }
                }
            }
            if area > 0 {
                next += 1;
            }
            break;
        }
    }
    LabeledImage::new(id, w, h, pixels, labels).expect("consistent buffers")
}

/// `count` images alternating between the two palettes, named `synth_000`,
/// `synth_001`, ...; image `i` depends only on `seed` and `i`.
pub fn synth_dataset(count: usize, cfg: &SynthConfig, seed: u64) -> Vec<LabeledImage> {
    (0..count)
        .map(|i| {
            let mut r = rng::stream(rng::sample_seed(seed, i as u64, 0));
            synth_image(&format!("synth_{i:03}"), cfg, &PALETTES[i % 2], &mut r)
        })
        .collect()
}
