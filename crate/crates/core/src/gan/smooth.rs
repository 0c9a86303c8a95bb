use super::network::{generator_forward, GanParams, GenVars};
use super::{image_tensor, to_byte};
use crate::dataset::LabeledImage;
use crate::error::{Error, Result};
use crate::geometry::Mask;
use crate::tensor::Tape;

/// Reflects `i` into `0..n` (edge pixel not repeated).
fn reflect(mut i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    i %= period;
    if i < n {
        i
    } else {
        period - i
    }
}

/// Regenerates the pixels under `template_mask` with the generator. Labels and
/// every pixel outside the mask are returned unchanged.
pub fn smooth(img: &LabeledImage, template_mask: &Mask, params: &GanParams) -> Result<LabeledImage> {
    let (w, h) = (img.width(), img.height());
    if template_mask.width() != w || template_mask.height() != h {
        return Err(Error::DimensionMismatch(format!(
            "template mask {}x{} vs image {w}x{h}",
            template_mask.width(),
            template_mask.height()
        )));
    }
    if template_mask.is_empty() {
        return Ok(img.clone());
    }
    let (pw, ph) = (w.div_ceil(16) * 16, h.div_ceil(16) * 16);
    let mut pixels = vec![0u8; pw * ph * 3];
    let mut t = Mask::new(pw, ph);
    let mut o = Mask::new(pw, ph);
    for y in 0..ph {
        for x in 0..pw {
            let (sx, sy) = (reflect(x, w), reflect(y, h));
            let d = (y * pw + x) * 3;
            pixels[d..d + 3].copy_from_slice(&img.rgb(sx, sy));
            if x < w && y < h {
                let inside = template_mask.get(x, y);
                t.set(x, y, inside);
                o.set(x, y, !inside && img.label(x, y) != 0);
            }
        }
    }
    let mut tape = Tape::new();
    let gv = GenVars::bind(&mut tape, params, false);
    let u = tape.constant(image_tensor(&pixels, pw, ph));
    let g = generator_forward(&mut tape, &gv, u, &t, &o)?;
    let gd = tape.value(g).data();
    let plane = pw * ph;
    let mut out = img.clone();
    for y in 0..h {
        for x in 0..w {
            if template_mask.get(x, y) {
                let d = (y * w + x) * 3;
                for c in 0..3 {
                    out.pixels_mut()[d + c] = to_byte(gd[c * plane + y * pw + x]);
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gan::GanConfig;
    use crate::rng;
    use rand::RngCore;

    #[test]
    fn reflection_indices() {
        assert_eq!((0..8).map(|i| reflect(i, 3)).collect::<Vec<_>>(), [0, 1, 2, 1, 0, 1, 2, 1]);
        assert_eq!(reflect(5, 1), 0);
    }

    #[test]
    fn only_masked_pixels_change() {
        let cfg = GanConfig {
            base_channels: 4,
            disc_channels: 4,
            ..GanConfig::default()
        };
        let params = GanParams::init(&cfg, &mut rng::stream(1)).unwrap();
        let (w, h) = (37, 21);
        let mut pixels = vec![0u8; w * h * 3];
        rng::stream(2).fill_bytes(&mut pixels);
        let mut labels = vec![0u16; w * h];
        let mut m = Mask::new(w, h);
        for y in 3..9 {
            for x in 4..12 {
                labels[y * w + x] = 1;
                labels[y * w + x + 15] = 2;
                m.set(x + 15, y, true);
            }
        }
        let img = LabeledImage::new("s", w, h, pixels, labels).unwrap();
        let out = smooth(&img, &m, &params).unwrap();
        assert_eq!(out.labels(), img.labels());
        let mut changed = 0;
        for y in 0..h {
            for x in 0..w {
                if !m.get(x, y) {
                    assert_eq!(out.rgb(x, y), img.rgb(x, y));
                } else if out.rgb(x, y) != img.rgb(x, y) {
                    changed += 1;
                }
            }
        }
        assert!(changed > 0);
        assert_eq!(smooth(&img, &Mask::new(w, h), &params).unwrap(), img);
    }
}
