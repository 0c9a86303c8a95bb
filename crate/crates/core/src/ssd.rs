//! Scale, shape and distance admissibility of a template against an anchor
//! instance.
//!
//! * scale: `max(|Mo|, |Mt|) / min(|Mo|, |Mt|)`, at most `epsilon`
//! * shape: `|Mo △ Mt| / max(|Mo|, |Mt|)` after aligning the centroids on a
//!   common canvas, at most `rho`
//! * distance: Euclidean centroid distance, within `[delta, gamma]`

use serde::{Deserialize, Serialize};

use crate::dataset::Instance;
use crate::error::{Error, Result};
use crate::geometry::Mask;

/// Thresholds. Every field is required when deserializing.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SsdConfig {
    pub epsilon: f64,
    pub rho: f64,
    pub delta: f64,
    pub gamma: f64,
}

impl SsdConfig {
    /// `epsilon=3.0, rho=0.5, delta=10, gamma=120`.
    pub const DEFAULT: SsdConfig = SsdConfig {
        epsilon: 3.0,
        rho: 0.5,
        delta: 10.0,
        gamma: 120.0,
    };

    pub fn validate(&self) -> Result<()> {
        let finite = [self.epsilon, self.rho, self.delta, self.gamma]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::InvalidConfig("ssd thresholds must be finite".into()));
        }
        if self.epsilon < 1.0 {
            return Err(Error::InvalidConfig(format!("epsilon {} < 1", self.epsilon)));
        }
        if !(0.0..=2.0).contains(&self.rho) {
            return Err(Error::InvalidConfig(format!("rho {} outside [0, 2]", self.rho)));
        }
        if self.delta < 0.0 || self.gamma <= 0.0 || self.delta > self.gamma {
            return Err(Error::InvalidConfig(format!(
                "need 0 <= delta <= gamma and gamma > 0, got delta={} gamma={}",
                self.delta, self.gamma
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Violation {
    Scale,
    Shape,
    Distance,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SsdReport {
    pub scale: f64,
    pub shape: f64,
    pub distance: f64,
    pub pass: bool,
    pub violated: Vec<Violation>,
}

pub fn f_scale(mo: &Mask, mt: &Mask) -> Result<f64> {
    let (a, b) = (mo.area(), mt.area());
    if a == 0 || b == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(a.max(b) as f64 / a.min(b) as f64)
}

pub fn f_shape(mo: &Mask, mt: &Mask) -> Result<f64> {
    let (co, ct) = match (mo.centroid(), mt.centroid()) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(Error::EmptyMask),
    };
    // Shift applied to `mt` so the centroids coincide. `f64::round` is odd
    // (half away from zero), which keeps the measure symmetric.
    let sx = (co.0 - ct.0).round() as i64;
    let sy = (co.1 - ct.1).round() as i64;

    let min_x = 0.min(sx);
    let min_y = 0.min(sy);
    let max_x = (mo.width() as i64).max(mt.width() as i64 + sx);
    let max_y = (mo.height() as i64).max(mt.height() as i64 + sy);
    let cw = (max_x - min_x) as usize;
    let ch = (max_y - min_y) as usize;

    let mut canvas = vec![0u8; cw * ch];
    for (x, y) in mo.points() {
        let cx = (x as i64 - min_x) as usize;
        let cy = (y as i64 - min_y) as usize;
        canvas[cy * cw + cx] ^= 1;
    }
    for (x, y) in mt.points() {
        let cx = (x as i64 + sx - min_x) as usize;
        let cy = (y as i64 + sy - min_y) as usize;
        canvas[cy * cw + cx] ^= 1;
    }
    let sym_diff = canvas.iter().filter(|&&c| c == 1).count();
    Ok(sym_diff as f64 / mo.area().max(mt.area()) as f64)
}

pub fn f_dis(c_o: (f64, f64), c_t: (f64, f64)) -> f64 {
    (c_o.0 - c_t.0).hypot(c_o.1 - c_t.1)
}

/// Evaluates all three constraints for `template` (already transformed)
/// centred at `target_centroid`, against `anchor`.
pub fn check_ssd(
    anchor: &Instance,
    template: &Instance,
    target_centroid: (f64, f64),
    cfg: &SsdConfig,
) -> Result<SsdReport> {
    let scale = f_scale(&anchor.mask, &template.mask)?;
    let shape = f_shape(&anchor.mask, &template.mask)?;
    let distance = f_dis(anchor.centroid, target_centroid);
    let mut violated = Vec::new();
    if scale > cfg.epsilon {
        violated.push(Violation::Scale);
    }
    if shape > cfg.rho {
        violated.push(Violation::Shape);
    }
    if distance < cfg.delta || distance > cfg.gamma {
        violated.push(Violation::Distance);
    }
    Ok(SsdReport {
        scale,
        shape,
        distance,
        pass: violated.is_empty(),
        violated,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BBox;

    fn mask_from(points: &[(i64, i64)]) -> Mask {
        Mask::from_points(points).unwrap().0
    }

    fn block(w: usize, h: usize) -> Mask {
        Mask::from_bits(w, h, vec![true; w * h])
    }

    fn instance(mask: Mask, origin: (i64, i64)) -> Instance {
        let (lx, ly) = mask.centroid().unwrap();
        Instance {
            label: 1,
            source_id: "s".into(),
            bbox: BBox {
                x: origin.0,
                y: origin.1,
                w: mask.width(),
                h: mask.height(),
            },
            pixels: vec![0; mask.width() * mask.height() * 3],
            area: mask.area(),
            centroid: (origin.0 as f64 + lx, origin.1 as f64 + ly),
            mask,
        }
    }

    #[test]
    fn scale_examples() {
        assert_eq!(f_scale(&block(10, 5), &block(5, 10)).unwrap(), 1.0);
        assert_eq!(f_scale(&block(10, 10), &block(10, 5)).unwrap(), 2.0);
        assert!(matches!(f_scale(&Mask::new(3, 3), &block(2, 2)), Err(Error::EmptyMask)));
    }

    #[test]
    fn shape_examples() {
        let b = block(4, 3);
        assert_eq!(f_shape(&b, &b).unwrap(), 0.0);
        let center = mask_from(&[(0, 0)]);
        assert_eq!(f_shape(&block(3, 3), &center).unwrap(), 8.0 / 9.0);
        // pixels given as (row, col): {(0,0),(0,2)} vs {(0,1)}
        let mo = mask_from(&[(0, 0), (2, 0)]);
        let mt = mask_from(&[(0, 0)]);
        assert_eq!(f_shape(&mo, &mt).unwrap(), 1.5);
        assert!(matches!(f_shape(&Mask::new(1, 1), &b), Err(Error::EmptyMask)));
    }

    #[test]
    fn distance_examples() {
        assert_eq!(f_dis((2.0, 2.0), (2.0, 2.0)), 0.0);
        assert_eq!(f_dis((0.0, 0.0), (3.0, 4.0)), 5.0);
    }

    #[test]
    fn identity_template_mid_annulus_passes() {
        let cfg = SsdConfig::DEFAULT;
        let a = instance(block(5, 4), (50, 50));
        let d = (cfg.delta + cfg.gamma) / 2.0;
        let target = (a.centroid.0 + d, a.centroid.1);
        let r = check_ssd(&a, &a, target, &cfg).unwrap();
        assert!(r.pass);
        assert_eq!((r.scale, r.shape), (1.0, 0.0));
    }

    #[test]
    fn beyond_gamma_is_distance_violation() {
        let cfg = SsdConfig::DEFAULT;
        let a = instance(block(5, 4), (0, 0));
        let target = (a.centroid.0, a.centroid.1 + cfg.gamma + 1.0);
        let r = check_ssd(&a, &a, target, &cfg).unwrap();
        assert_eq!(r.violated, vec![Violation::Distance]);
        assert!(!r.pass);
    }

    #[test]
    fn scale_violation_at_ratio_two() {
        let cfg = SsdConfig {
            epsilon: 1.5,
            ..SsdConfig::DEFAULT
        };
        let a = instance(block(10, 10), (0, 0));
        let t = instance(block(10, 5), (0, 0));
        let r = check_ssd(&a, &t, (a.centroid.0 + 20.0, a.centroid.1), &cfg).unwrap();
        assert_eq!(r.scale, 2.0);
        assert!(r.violated.contains(&Violation::Scale));
    }

    #[test]
    fn config_validation() {
        assert!(SsdConfig::DEFAULT.validate().is_ok());
        let bad = SsdConfig {
            delta: 5.0,
            gamma: 3.0,
            ..SsdConfig::DEFAULT
        };
        assert!(matches!(bad.validate(), Err(Error::InvalidConfig(_))));
        assert!(SsdConfig { epsilon: 0.5, ..SsdConfig::DEFAULT }.validate().is_err());
        assert!(SsdConfig { rho: 2.5, ..SsdConfig::DEFAULT }.validate().is_err());
        let json = r#"{"epsilon":3.0,"rho":0.5,"delta":10}"#;
        assert!(serde_json::from_str::<SsdConfig>(json).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn arb_mask() -> impl Strategy<Value = Mask> {
            (1usize..7, 1usize..7)
                .prop_flat_map(|(w, h)| {
                    proptest::collection::vec(any::<bool>(), w * h).prop_map(move |bits| (w, h, bits))
                })
                .prop_filter("non-empty", |(_, _, b)| b.iter().any(|&x| x))
                .prop_map(|(w, h, b)| Mask::from_bits(w, h, b))
        }

        fn shifted(m: &Mask, dx: usize, dy: usize) -> Mask {
            let mut out = Mask::new(m.width() + dx, m.height() + dy);
            for (x, y) in m.points() {
                out.set(x + dx, y + dy, true);
            }
            out
        }

        proptest! {
            #[test]
            fn symmetric_and_bounded(a in arb_mask(), b in arb_mask()) {
                let s1 = f_scale(&a, &b).unwrap();
                prop_assert_eq!(s1, f_scale(&b, &a).unwrap());
                prop_assert!(s1 >= 1.0);
                let h1 = f_shape(&a, &b).unwrap();
                prop_assert_eq!(h1, f_shape(&b, &a).unwrap());
                prop_assert!((0.0..=2.0).contains(&h1));
            }

            #[test]
            fn shape_zero_iff_aligned_identical(a in arb_mask(), dx in 0usize..4, dy in 0usize..4) {
                // Padding moves the centroid by an integer; the measure must not notice.
                prop_assert_eq!(f_shape(&a, &shifted(&a, dx, dy)).unwrap(), 0.0);
            }

            #[test]
            fn distance_matches_arithmetic(dx in -50.0f64..50.0, dy in -50.0f64..50.0) {
                let d = f_dis((1.0, 1.0), (1.0 + dx, 1.0 + dy));
                prop_assert!((d - (dx * dx + dy * dy).sqrt()).abs() < 1e-12);
                prop_assert_eq!(d, f_dis((1.0 + dx, 1.0 + dy), (1.0, 1.0)));
            }

            #[test]
            fn translation_invariant(
                a in arb_mask(), b in arb_mask(),
                tx in -40i64..40, ty in -40i64..40,
                ox in -40.0f64..40.0, oy in -40.0f64..40.0,
            ) {
                let cfg = SsdConfig { epsilon: 2.0, rho: 0.8, delta: 5.0, gamma: 30.0 };
                let ia = instance(a.clone(), (0, 0));
                let ib = instance(b.clone(), (0, 0));
                let target = (ia.centroid.0 + ox, ia.centroid.1 + oy);
                let r1 = check_ssd(&ia, &ib, target, &cfg).unwrap();
                let ja = instance(a, (tx, ty));
                let jb = instance(b, (tx, ty));
                let r2 = check_ssd(&ja, &jb, (target.0 + tx as f64, target.1 + ty as f64), &cfg).unwrap();
                prop_assert_eq!(r1.pass, r2.pass);
            }

            #[test]
            fn loosening_never_fails_a_pass(
                a in arb_mask(), b in arb_mask(),
                ox in -40.0f64..40.0, oy in -40.0f64..40.0,
                de in 0.0f64..2.0, dr in 0.0f64..1.0, dd in 0.0f64..5.0, dg in 0.0f64..20.0,
            ) {
                let cfg = SsdConfig { epsilon: 2.0, rho: 0.8, delta: 5.0, gamma: 30.0 };
                let loose = SsdConfig {
                    epsilon: cfg.epsilon + de,
                    rho: (cfg.rho + dr).min(2.0),
                    delta: cfg.delta - dd,
                    gamma: cfg.gamma + dg,
                };
                let ia = instance(a, (0, 0));
                let ib = instance(b, (0, 0));
                let target = (ia.centroid.0 + ox, ia.centroid.1 + oy);
                if check_ssd(&ia, &ib, target, &cfg).unwrap().pass {
                    prop_assert!(check_ssd(&ia, &ib, target, &loose).unwrap().pass);
                }
            }
        }
    }
}
