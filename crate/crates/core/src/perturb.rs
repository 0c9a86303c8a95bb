//! Background cell shuffling.
//!
//! The image is tiled from the origin into `patch_size`-square cells; partial
//! cells on the right and bottom edges are left alone. Cells without a single
//! labeled pixel are eligible, `ceil(alpha * eligible)` of them are drawn and
//! their RGB contents permuted among themselves. Labels never change.

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::LabeledImage;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerturbConfig {
    pub alpha: f64,
    pub patch_size: usize,
}

impl Default for PerturbConfig {
    fn default() -> Self {
        PerturbConfig {
            alpha: 0.2,
            patch_size: 20,
        }
    }
}

impl PerturbConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::InvalidConfig(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if self.patch_size == 0 {
            return Err(Error::InvalidConfig("patch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Which cells were shuffled: cell `cells[i]` received the content that was in
/// cell `sources[i]`. Cells are numbered row-major over the full-cell grid.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShuffleRecord {
    pub patch_size: usize,
    pub cells: Vec<usize>,
    pub sources: Vec<usize>,
}

impl ShuffleRecord {
    /// Top-left pixel of a cell.
    pub fn cell_origin(&self, cell: usize, image_width: usize) -> (usize, usize) {
        let cols = image_width / self.patch_size;
        ((cell % cols) * self.patch_size, (cell / cols) * self.patch_size)
    }

    /// Re-applies the recorded permutation.
    pub fn apply(&self, img: &LabeledImage) -> Result<LabeledImage> {
        let p = self.patch_size;
        let (w, h) = (img.width(), img.height());
        let ncells = if p == 0 { 0 } else { (w / p) * (h / p) };
        if self.cells.len() != self.sources.len()
            || self.cells.iter().chain(&self.sources).any(|&c| c >= ncells)
        {
            return Err(Error::Malformed("shuffle record does not fit the image".into()));
        }
        let mut out = img.clone();
        for (&dst, &src) in self.cells.iter().zip(&self.sources) {
            let (dx, dy) = self.cell_origin(dst, w);
            let (sx, sy) = self.cell_origin(src, w);
            for r in 0..p {
                let d = ((dy + r) * w + dx) * 3;
                let s = ((sy + r) * w + sx) * 3;
                out.pixels_mut()[d..d + p * 3].copy_from_slice(&img.pixels()[s..s + p * 3]);
            }
        }
        Ok(out)
    }
}

/// Cells with no labeled pixel, row-major.
pub fn eligible_cells(img: &LabeledImage, patch_size: usize) -> Vec<usize> {
    let (w, h) = (img.width(), img.height());
    let (cols, rows) = (w / patch_size, h / patch_size);
    (0..rows * cols)
        .filter(|&c| {
            let (x0, y0) = ((c % cols) * patch_size, (c / cols) * patch_size);
            (y0..y0 + patch_size).all(|y| img.labels()[y * w + x0..y * w + x0 + patch_size].iter().all(|&l| l == 0))
        })
        .collect()
}

pub fn perturb_background<R: Rng + ?Sized>(
    img: &LabeledImage,
    cfg: &PerturbConfig,
    rng: &mut R,
) -> Result<(LabeledImage, ShuffleRecord)> {
    cfg.validate()?;
    let eligible = eligible_cells(img, cfg.patch_size);
    let k = ((cfg.alpha * eligible.len() as f64).ceil() as usize).min(eligible.len());
    let mut cells: Vec<usize> = index::sample(rng, eligible.len(), k)
        .into_iter()
        .map(|i| eligible[i])
        .collect();
    cells.sort_unstable();
    let mut sources = cells.clone();
    sources.shuffle(rng);
    let record = ShuffleRecord {
        patch_size: cfg.patch_size,
        cells,
        sources,
    };
    let out = record.apply(img)?;
    Ok((out, record))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::RngCore;

    fn noise_image(w: usize, h: usize, seed: u64, fg: &[(usize, usize, usize, usize)]) -> LabeledImage {
        let mut r = rng::stream(seed);
        let mut pixels = vec![0u8; w * h * 3];
        r.fill_bytes(&mut pixels);
        let mut labels = vec![0u16; w * h];
        for (k, &(x0, y0, bw, bh)) in fg.iter().enumerate() {
            for y in y0..y0 + bh {
                for x in x0..x0 + bw {
                    labels[y * w + x] = k as u16 + 1;
                }
            }
        }
        LabeledImage::new("n", w, h, pixels, labels).unwrap()
    }

    fn cell_bytes(img: &LabeledImage, p: usize, cell: usize) -> Vec<u8> {
        let cols = img.width() / p;
        let (x0, y0) = ((cell % cols) * p, (cell / cols) * p);
        (y0..y0 + p)
            .flat_map(|y| img.pixels()[(y * img.width() + x0) * 3..(y * img.width() + x0 + p) * 3].to_vec())
            .collect()
    }

    #[test]
    fn alpha_zero_is_identity() {
        let img = noise_image(60, 45, 1, &[(3, 3, 5, 5)]);
        let cfg = PerturbConfig { alpha: 0.0, patch_size: 10 };
        let (out, rec) = perturb_background(&img, &cfg, &mut rng::stream(2)).unwrap();
        assert_eq!(out, img);
        assert!(rec.cells.is_empty());
    }

    #[test]
    fn single_eligible_cell_is_identity() {
        // 2x1 cells, the left one holds a nucleus
        let img = noise_image(20, 10, 3, &[(2, 2, 3, 3)]);
        let cfg = PerturbConfig { alpha: 1.0, patch_size: 10 };
        assert_eq!(eligible_cells(&img, 10), vec![1]);
        let (out, _) = perturb_background(&img, &cfg, &mut rng::stream(4)).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn chosen_count_is_ceiling() {
        let img = noise_image(100, 100, 5, &[]);
        let cfg = PerturbConfig { alpha: 0.2, patch_size: 20 };
        let (_, rec) = perturb_background(&img, &cfg, &mut rng::stream(6)).unwrap();
        assert_eq!(rec.cells.len(), 5); // ceil(0.2 * 25)
        let cfg = PerturbConfig { alpha: 0.01, patch_size: 20 };
        let (_, rec) = perturb_background(&img, &cfg, &mut rng::stream(6)).unwrap();
        assert_eq!(rec.cells.len(), 1);
    }

    #[test]
    fn foreground_fixed_and_cells_permuted() {
        let img = noise_image(200, 200, 7, &[(30, 30, 15, 12), (120, 90, 8, 30), (5, 170, 40, 6)]);
        let cfg = PerturbConfig { alpha: 0.2, patch_size: 20 };
        let (out, rec) = perturb_background(&img, &cfg, &mut rng::stream(8)).unwrap();
        assert_eq!(out.labels(), img.labels());
        for (i, &l) in img.labels().iter().enumerate() {
            if l != 0 {
                assert_eq!(out.pixels()[i * 3..i * 3 + 3], img.pixels()[i * 3..i * 3 + 3]);
            }
        }
        let mut before: Vec<Vec<u8>> = rec.cells.iter().map(|&c| cell_bytes(&img, 20, c)).collect();
        let mut after: Vec<Vec<u8>> = rec.cells.iter().map(|&c| cell_bytes(&out, 20, c)).collect();
        before.sort();
        after.sort();
        assert_eq!(before, after);
    }

    #[test]
    fn partial_edge_cells_never_move() {
        let img = noise_image(47, 33, 9, &[]);
        let cfg = PerturbConfig { alpha: 1.0, patch_size: 10 };
        let (out, _) = perturb_background(&img, &cfg, &mut rng::stream(10)).unwrap();
        for y in 0..33 {
            for x in 0..47 {
                if x >= 40 || y >= 30 {
                    assert_eq!(out.rgb(x, y), img.rgb(x, y));
                }
            }
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(48))]
            #[test]
            fn histogram_invariant_when_all_cells_eligible(seed in any::<u64>(), alpha in 0.0f64..=1.0) {
                let img = noise_image(40, 40, seed, &[]);
                let cfg = PerturbConfig { alpha, patch_size: 8 };
                let (out, _) = perturb_background(&img, &cfg, &mut rng::stream(seed ^ 1)).unwrap();
                let hist = |im: &LabeledImage| {
                    let mut h = vec![0usize; 256 * 3];
                    for (i, &b) in im.pixels().iter().enumerate() { h[(i % 3) * 256 + b as usize] += 1; }
                    h
                };
                prop_assert_eq!(hist(&img), hist(&out));
            }

            #[test]
            fn deterministic(seed in any::<u64>()) {
                let img = noise_image(40, 40, 1, &[(4, 4, 6, 6)]);
                let cfg = PerturbConfig { alpha: 0.5, patch_size: 8 };
                let a = perturb_background(&img, &cfg, &mut rng::stream(seed)).unwrap();
                let b = perturb_background(&img, &cfg, &mut rng::stream(seed)).unwrap();
                prop_assert_eq!(a, b);
            }
        }
    }
}
