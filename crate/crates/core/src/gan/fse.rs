//! Foreground similarity encoder.
//!
//! Every template-region position takes the softmax-weighted average of the
//! centre features of the original-instance positions, the weights being the
//! cosine similarities of the surrounding 3×3 feature patches.

use crate::error::{Error, Result};
use crate::geometry::Mask;
use crate::tensor::{Tape, Var};

pub struct FseOutput {
    /// Same shape as the input feature map.
    pub out: Var,
    /// `n_template × n_original` attention weights; `None` when the template
    /// region is empty.
    pub weights: Option<Var>,
    pub template_positions: Vec<usize>,
    pub original_positions: Vec<usize>,
}

/// `feat` is `1×C×h×w`; both masks are `w×h` at feature resolution.
pub fn fse(tape: &mut Tape, feat: Var, template_mask: &Mask, original_mask: &Mask) -> Result<FseOutput> {
    let s = tape.value(feat).shape().to_vec();
    if s.len() != 4 || s[0] != 1 {
        return Err(Error::ShapeMismatch(format!("fse expects 1xCxHxW, got {s:?}")));
    }
    let (h, w) = (s[2], s[3]);
    for m in [template_mask, original_mask] {
        if m.width() != w || m.height() != h {
            return Err(Error::DimensionMismatch(format!(
                "fse mask {}x{} vs features {w}x{h}",
                m.width(),
                m.height()
            )));
        }
    }
    let positions = |m: &Mask| -> Vec<usize> {
        m.bits().iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i).collect()
    };
    let t_idx = positions(template_mask);
    let o_idx = positions(original_mask);
    if t_idx.is_empty() {
        return Ok(FseOutput {
            out: feat,
            weights: None,
            template_positions: t_idx,
            original_positions: o_idx,
        });
    }
    if o_idx.is_empty() {
        return Err(Error::NoOriginalRegion);
    }

    let patches = tape.unfold(feat, 3)?;
    let pt = tape.gather_rows(patches, &t_idx)?;
    let po = tape.gather_rows(patches, &o_idx)?;
    let pt = tape.normalize_rows(pt)?;
    let po = tape.normalize_rows(po)?;
    let sim = tape.matmul_nt(pt, po)?;
    let weights = tape.softmax(sim, 1)?;

    let rows = tape.channels_to_rows(feat)?;
    let centres = tape.gather_rows(rows, &o_idx)?;
    let fused = tape.matmul(weights, centres)?;
    let rows = tape.scatter_rows(rows, &t_idx, fused)?;
    let out = tape.rows_to_channels(rows, h, w)?;
    Ok(FseOutput {
        out,
        weights: Some(weights),
        template_positions: t_idx,
        original_positions: o_idx,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::tensor::Tensor;

    fn mask(w: usize, h: usize, on: &[usize]) -> Mask {
        let mut bits = vec![false; w * h];
        for &i in on {
            bits[i] = true;
        }
        Mask::from_bits(w, h, bits)
    }

    fn feature(tape: &Tape, v: Var, pos: usize) -> Vec<f64> {
        let s = tape.value(v).shape();
        let plane = s[2] * s[3];
        (0..s[1]).map(|c| tape.value(v).data()[c * plane + pos]).collect()
    }

    #[test]
    fn single_original_position_is_copied() {
        let mut tape = Tape::new();
        let f = tape.constant(Tensor::randn(&[1, 4, 5, 5], 1.0, &mut rng::stream(2)));
        let out = fse(&mut tape, f, &mask(5, 5, &[0, 7, 24]), &mask(5, 5, &[12])).unwrap();
        let src = feature(&tape, f, 12);
        for p in [0, 7, 24] {
            assert_eq!(feature(&tape, out.out, p), src);
        }
        // untouched elsewhere
        for p in [1, 12, 13] {
            assert_eq!(feature(&tape, out.out, p), feature(&tape, f, p));
        }
    }

    #[test]
    fn identical_originals_give_common_feature() {
        // constant feature map: every patch away from the border is identical
        let mut tape = Tape::new();
        let f = tape.constant(Tensor::full(&[1, 3, 7, 7], 0.7));
        let originals = [16, 17, 18, 23, 24, 25];
        let out = fse(&mut tape, f, &mask(7, 7, &[8, 40]), &mask(7, 7, &originals)).unwrap();
        for p in [8, 40] {
            for v in feature(&tape, out.out, p) {
                assert!((v - 0.7).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn two_orthogonal_candidates() {
        // 1 channel on a 1x7 strip; patches are [f(p-1), f(p), f(p+1)] times the
        // zero rows above and below. Template at 1, originals at 1 (same patch,
        // similarity 1) and at 5 (orthogonal support, similarity 0).
        let mut tape = Tape::new();
        let data = vec![1.0, 2.0, 3.0, 0.0, 1.0, 1.0, -1.0];
        let f = tape.constant(Tensor::new(&[1, 1, 1, 7], data).unwrap());
        let out = fse(&mut tape, f, &mask(7, 1, &[1]), &mask(7, 1, &[1, 5])).unwrap();
        let w = tape.value(out.weights.unwrap()).data().to_vec();
        let e = std::f64::consts::E;
        assert!((w[0] - e / (e + 1.0)).abs() < 1e-12);
        assert!((w[1] - 1.0 / (e + 1.0)).abs() < 1e-12);
        assert!((w[0] - 0.731).abs() < 1e-3 && (w[1] - 0.269).abs() < 1e-3);
    }

    #[test]
    fn empty_original_region_is_an_error() {
        let mut tape = Tape::new();
        let f = tape.constant(Tensor::zeros(&[1, 2, 3, 3]));
        assert!(matches!(
            fse(&mut tape, f, &mask(3, 3, &[4]), &mask(3, 3, &[])),
            Err(Error::NoOriginalRegion)
        ));
        let out = fse(&mut tape, f, &mask(3, 3, &[]), &mask(3, 3, &[])).unwrap();
        assert_eq!(out.out, f);
    }
}
