//! Copy-paste of bank templates next to existing instances.
//!
//! A placement is proposed by drawing an anchor instance, a template of
//! compatible area, an optional flip/rotation and a target centroid in the
//! annulus `[delta, gamma]` around the anchor. It is kept only if it passes the
//! SSD check, lies inside the image and does not hide more than
//! `occlusion_cap` of any instance already present.

use std::collections::HashMap;
use std::f64::consts::TAU;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bank::{random_transform, InstanceBank, TemplateFilter};
use crate::dataset::{extract_instances, Instance, LabeledImage};
use crate::error::{Error, Result};
use crate::geometry::{Mask, Transform};
use crate::ssd::{check_ssd, SsdConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct CompositorConfig {
    /// Pasted count as a fraction of the original instance count.
    pub paste_ratio: f64,
    pub max_attempts: usize,
    /// Largest fraction of any instance that later pastes may cover, `[0, 1)`.
    pub occlusion_cap: f64,
    pub template_transforms: bool,
    pub ssd: SsdConfig,
}

impl CompositorConfig {
    pub fn with_ssd(ssd: SsdConfig) -> Self {
        CompositorConfig {
            paste_ratio: 0.5,
            max_attempts: 50,
            occlusion_cap: 0.3,
            template_transforms: true,
            ssd,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.ssd.validate()?;
        if !(self.paste_ratio.is_finite() && self.paste_ratio >= 0.0) {
            return Err(Error::InvalidConfig(format!("paste_ratio {} < 0", self.paste_ratio)));
        }
        if self.max_attempts == 0 {
            return Err(Error::InvalidConfig("max_attempts must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.occlusion_cap) {
            return Err(Error::InvalidConfig(format!(
                "occlusion_cap {} outside [0, 1)",
                self.occlusion_cap
            )));
        }
        Ok(())
    }
}

/// An accepted paste.
#[derive(Clone, Debug, PartialEq)]
pub struct Placement {
    /// Transformed template with its box at the paste position.
    pub template: Instance,
    pub transform: Transform,
    pub target_centroid: (i64, i64),
    pub anchor_label: u16,
    pub new_label: u16,
}

impl Placement {
    pub fn record(&self) -> PlacementRecord {
        PlacementRecord {
            template_source: self.template.source_id.clone(),
            template_label: self.template.label,
            transform: self.transform,
            target: [self.target_centroid.0, self.target_centroid.1],
            anchor_label: self.anchor_label,
            new_label: self.new_label,
        }
    }
}

/// Serialized form of a [`Placement`], enough to rebuild it from the bank.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlacementRecord {
    pub template_source: String,
    pub template_label: u16,
    pub transform: Transform,
    pub target: [i64; 2],
    pub anchor_label: u16,
    pub new_label: u16,
}

impl PlacementRecord {
    pub fn resolve(&self, bank: &InstanceBank) -> Result<Placement> {
        let tpl = bank
            .find(&self.template_source, self.template_label)
            .ok_or_else(|| {
                Error::Malformed(format!(
                    "template {}#{} not in bank",
                    self.template_source, self.template_label
                ))
            })?;
        let target = (self.target[0], self.target[1]);
        Ok(Placement {
            template: tpl.transformed(&self.transform).placed_at(target),
            transform: self.transform,
            target_centroid: target,
            anchor_label: self.anchor_label,
            new_label: self.new_label,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlacementPlan {
    pub placements: Vec<Placement>,
    /// Union of every pasted footprint over the image.
    pub template_mask: Mask,
}

impl PlacementPlan {
    pub fn empty(width: usize, height: usize) -> Self {
        PlacementPlan {
            placements: Vec::new(),
            template_mask: Mask::new(width, height),
        }
    }

    pub fn from_placements(placements: Vec<Placement>, width: usize, height: usize) -> Self {
        let mut template_mask = Mask::new(width, height);
        for p in &placements {
            for (x, y, _) in footprint(&p.template) {
                if x >= 0 && y >= 0 && (x as usize) < width && (y as usize) < height {
                    template_mask.set(x as usize, y as usize, true);
                }
            }
        }
        PlacementPlan {
            placements,
            template_mask,
        }
    }

    pub fn records(&self) -> Vec<PlacementRecord> {
        self.placements.iter().map(Placement::record).collect()
    }
}

/// Image coordinates of mask cells with their local index.
fn footprint(inst: &Instance) -> impl Iterator<Item = (i64, i64, usize)> + '_ {
    let w = inst.bbox.w;
    inst.mask
        .points()
        .map(move |(x, y)| (inst.bbox.x + x as i64, inst.bbox.y + y as i64, y * w + x))
}

pub fn propose_placements<R: Rng + ?Sized>(
    img: &LabeledImage,
    bank: &InstanceBank,
    cfg: &CompositorConfig,
    rng: &mut R,
) -> Result<PlacementPlan> {
    cfg.validate()?;
    let anchors = extract_instances(img);
    if anchors.is_empty() {
        return Err(Error::NoAnchor);
    }
    let (w, h) = (img.width(), img.height());
    let target = (cfg.paste_ratio * anchors.len() as f64).round() as usize;

    // Current label map plus, per id, (full area, currently visible cells).
    let mut work = img.labels().to_vec();
    let mut areas: HashMap<u16, (usize, usize)> =
        anchors.iter().map(|a| (a.label, (a.area, a.area))).collect();
    let mut next_label = img.max_label() as u32 + 1;
    let mut placements = Vec::with_capacity(target);

    for _ in 0..target {
        if next_label > u16::MAX as u32 {
            return Err(Error::LabelOverflow);
        }
        let mut accepted = None;
        for _ in 0..cfg.max_attempts {
            let anchor = &anchors[rng.random_range(0..anchors.len())];
            let eps = cfg.ssd.epsilon;
            let filter = TemplateFilter::area(
                (anchor.area as f64 / eps).ceil() as usize,
                (anchor.area as f64 * eps).floor() as usize,
            );
            let template = match bank.sample(&filter, rng) {
                Ok(t) => t,
                Err(Error::NoCandidate) => continue,
                Err(e) => return Err(e),
            };
            let transform = if cfg.template_transforms {
                random_transform(rng)
            } else {
                Transform::IDENTITY
            };
            let angle = rng.random_range(0.0..TAU);
            let radius = if cfg.ssd.gamma > cfg.ssd.delta {
                rng.random_range(cfg.ssd.delta..=cfg.ssd.gamma)
            } else {
                cfg.ssd.delta
            };
            let tc = (
                (anchor.centroid.0 + radius * angle.cos()).round() as i64,
                (anchor.centroid.1 + radius * angle.sin()).round() as i64,
            );
            let placed = template.transformed(&transform).placed_at(tc);
            if !placed.bbox.fits_in(w, h) {
                continue;
            }
            if !check_ssd(anchor, &placed, placed.centroid, &cfg.ssd)?.pass {
                continue;
            }
            if !occlusion_ok(&placed, &work, w, &areas, cfg.occlusion_cap) {
                continue;
            }
            accepted = Some((placed, transform, tc, anchor.label));
            break;
        }
        let Some((placed, transform, tc, anchor_label)) = accepted else {
            continue;
        };
        let new_label = next_label as u16;
        next_label += 1;
        for (x, y, _) in footprint(&placed) {
            let i = y as usize * w + x as usize;
            let prev = work[i];
            if prev != 0 {
                if let Some(a) = areas.get_mut(&prev) {
                    a.1 -= 1;
                }
            }
            work[i] = new_label;
        }
        areas.insert(new_label, (placed.area, placed.area));
        placements.push(Placement {
            template: placed,
            transform,
            target_centroid: tc,
            anchor_label,
            new_label,
        });
    }
    if placements.len() < target {
        log::warn!(
            "{}: placed {} of {} templates within {} attempts each",
            img.id,
            placements.len(),
            target,
            cfg.max_attempts
        );
    }
    Ok(PlacementPlan::from_placements(placements, w, h))
}

fn occlusion_ok(
    placed: &Instance,
    work: &[u16],
    width: usize,
    areas: &HashMap<u16, (usize, usize)>,
    cap: f64,
) -> bool {
    let mut covered: HashMap<u16, usize> = HashMap::new();
    for (x, y, _) in footprint(placed) {
        let l = work[y as usize * width + x as usize];
        if l != 0 {
            *covered.entry(l).or_default() += 1;
        }
    }
    covered.iter().all(|(l, &c)| {
        let (full, visible) = areas.get(l).copied().unwrap_or((0, 0));
        (visible - c.min(visible)) as f64 >= (1.0 - cap) * full as f64 && visible > c
    })
}

/// Pastes every placement in order: template RGB overwrites the image under
/// the transformed mask and the label map receives `new_label` there.
pub fn apply_plan(img: &LabeledImage, plan: &PlacementPlan) -> Result<LabeledImage> {
    let (w, h) = (img.width(), img.height());
    if plan.template_mask.width() != w || plan.template_mask.height() != h {
        return Err(Error::DimensionMismatch(format!(
            "plan mask {}x{} vs image {w}x{h}",
            plan.template_mask.width(),
            plan.template_mask.height()
        )));
    }
    let existing = img.max_label();
    let mut out = img.clone();
    for p in &plan.placements {
        if !p.template.bbox.fits_in(w, h) {
            return Err(Error::OutOfBounds(format!(
                "template {}#{} at {:?} outside {w}x{h}",
                p.template.source_id, p.template.label, p.template.bbox
            )));
        }
        if p.new_label <= existing && img.labels().contains(&p.new_label) {
            return Err(Error::InvalidConfig(format!(
                "new label {} already present",
                p.new_label
            )));
        }
        for (x, y, li) in footprint(&p.template) {
            let i = y as usize * w + x as usize;
            out.pixels_mut()[i * 3..i * 3 + 3].copy_from_slice(&p.template.pixels[li * 3..li * 3 + 3]);
            out.labels_mut()[i] = p.new_label;
        }
    }
    Ok(out)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::rng;

    /// Image with filled disks of the given radius at the given centres.
    pub(crate) fn disks(w: usize, h: usize, centres: &[(f64, f64)], r: f64, color: u8) -> LabeledImage {
        let mut pixels = vec![200u8; w * h * 3];
        let mut labels = vec![0u16; w * h];
        for (k, &(cx, cy)) in centres.iter().enumerate() {
            for y in 0..h {
                for x in 0..w {
                    let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                    if dx * dx + dy * dy <= r * r {
                        labels[y * w + x] = k as u16 + 1;
                        pixels[(y * w + x) * 3..(y * w + x) * 3 + 3].copy_from_slice(&[color, 40, 90]);
                    }
                }
            }
        }
        LabeledImage::new("disks", w, h, pixels, labels).unwrap()
    }

    fn cfg() -> CompositorConfig {
        CompositorConfig::with_ssd(SsdConfig {
            epsilon: 2.0,
            rho: 0.6,
            delta: 8.0,
            gamma: 30.0,
        })
    }

    #[test]
    fn zero_ratio_gives_empty_plan() {
        let img = disks(64, 64, &[(20.0, 20.0), (40.0, 44.0)], 4.0, 60);
        let bank = InstanceBank::build(std::slice::from_ref(&img)).unwrap();
        let c = CompositorConfig { paste_ratio: 0.0, ..cfg() };
        let plan = propose_placements(&img, &bank, &c, &mut rng::stream(1)).unwrap();
        assert!(plan.placements.is_empty());
        assert!(plan.template_mask.is_empty());
        assert_eq!(apply_plan(&img, &plan).unwrap(), img);
    }

    #[test]
    fn inverted_distance_bounds_rejected() {
        let img = disks(32, 32, &[(10.0, 10.0)], 3.0, 60);
        let bank = InstanceBank::build(std::slice::from_ref(&img)).unwrap();
        let mut c = cfg();
        c.ssd.delta = 5.0;
        c.ssd.gamma = 3.0;
        assert!(matches!(
            propose_placements(&img, &bank, &c, &mut rng::stream(1)),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn no_instances_no_anchor() {
        let src = disks(32, 32, &[(10.0, 10.0)], 3.0, 60);
        let bank = InstanceBank::build(&[src]).unwrap();
        let empty = disks(32, 32, &[], 3.0, 60);
        assert!(matches!(
            propose_placements(&empty, &bank, &cfg(), &mut rng::stream(1)),
            Err(Error::NoAnchor)
        ));
    }

    #[test]
    fn single_paste_adds_one_label_and_template_area() {
        let img = disks(64, 64, &[(20.0, 20.0)], 4.0, 60);
        let bank = InstanceBank::build(std::slice::from_ref(&img)).unwrap();
        let tpl = bank.entries()[0].clone();
        let placed = tpl.placed_at((45, 45));
        let plan = PlacementPlan::from_placements(
            vec![Placement {
                template: placed,
                transform: Transform::IDENTITY,
                target_centroid: (45, 45),
                anchor_label: 1,
                new_label: 2,
            }],
            64,
            64,
        );
        let out = apply_plan(&img, &plan).unwrap();
        let fg = |im: &LabeledImage| im.labels().iter().filter(|&&l| l != 0).count();
        assert_eq!(out.instance_ids().len(), img.instance_ids().len() + 1);
        assert_eq!(fg(&out), fg(&img) + tpl.area);
    }

    #[test]
    fn later_placement_wins_overlap() {
        let img = disks(64, 64, &[(10.0, 10.0)], 3.0, 60);
        let bank = InstanceBank::build(std::slice::from_ref(&img)).unwrap();
        let tpl = &bank.entries()[0];
        let p = |c: (i64, i64), l| Placement {
            template: tpl.placed_at(c),
            transform: Transform::IDENTITY,
            target_centroid: c,
            anchor_label: 1,
            new_label: l,
        };
        let plan = PlacementPlan::from_placements(vec![p((40, 40), 2), p((42, 40), 3)], 64, 64);
        let out = apply_plan(&img, &plan).unwrap();
        assert_eq!(out.label(41, 40), 3);
        assert_eq!(out.label(37, 40), 2);
    }

    #[test]
    fn out_of_bounds_plan_rejected() {
        let img = disks(32, 32, &[(10.0, 10.0)], 3.0, 60);
        let bank = InstanceBank::build(std::slice::from_ref(&img)).unwrap();
        let tpl = &bank.entries()[0];
        let plan = PlacementPlan {
            placements: vec![Placement {
                template: tpl.placed_at((31, 31)),
                transform: Transform::IDENTITY,
                target_centroid: (31, 31),
                anchor_label: 1,
                new_label: 2,
            }],
            template_mask: Mask::new(32, 32),
        };
        assert!(matches!(apply_plan(&img, &plan), Err(Error::OutOfBounds(_))));
    }

    #[test]
    fn zero_occlusion_disks_never_overlap_originals() {
        let centres: Vec<(f64, f64)> = (0..9)
            .map(|k| (20.0 + 40.0 * (k % 3) as f64, 20.0 + 40.0 * (k / 3) as f64))
            .collect();
        let img = disks(128, 128, &centres, 4.0, 60);
        let bank = InstanceBank::build(std::slice::from_ref(&img)).unwrap();
        let c = CompositorConfig {
            paste_ratio: 1.0,
            occlusion_cap: 0.0,
            ..cfg()
        };
        for seed in 0..20 {
            let plan = propose_placements(&img, &bank, &c, &mut rng::stream(seed)).unwrap();
            for p in &plan.placements {
                for (x, y, _) in footprint(&p.template) {
                    assert_eq!(img.label(x as usize, y as usize), 0);
                }
            }
        }
    }

    #[test]
    fn plan_is_deterministic_and_consistent() {
        let centres = [(20.0, 20.0), (44.0, 24.0), (30.0, 46.0), (50.0, 50.0)];
        let img = disks(72, 72, &centres, 5.0, 60);
        let bank = InstanceBank::build(std::slice::from_ref(&img)).unwrap();
        let c = CompositorConfig { paste_ratio: 1.0, ..cfg() };
        let a = propose_placements(&img, &bank, &c, &mut rng::stream(9)).unwrap();
        let b = propose_placements(&img, &bank, &c, &mut rng::stream(9)).unwrap();
        assert_eq!(a, b);
        assert!(!a.placements.is_empty());
        let out = apply_plan(&img, &a).unwrap();
        let new: Vec<u16> = a.placements.iter().map(|p| p.new_label).collect();
        for y in 0..72 {
            for x in 0..72 {
                let in_m = a.template_mask.get(x, y);
                assert_eq!(in_m, new.contains(&out.label(x, y)));
                if !in_m {
                    assert_eq!(out.rgb(x, y), img.rgb(x, y));
                    assert_eq!(out.label(x, y), img.label(x, y));
                }
            }
        }
        // every original id survives with at least (1 - cap) of its area
        for inst in extract_instances(&img) {
            let vis = out.labels().iter().filter(|&&l| l == inst.label).count();
            assert!(vis as f64 >= (1.0 - c.occlusion_cap) * inst.area as f64);
        }
        assert_eq!(out.instance_ids().len(), 4 + a.placements.len());
    }

    #[test]
    fn record_resolves_to_same_placement() {
        let img = disks(72, 72, &[(20.0, 20.0), (44.0, 24.0)], 5.0, 60);
        let bank = InstanceBank::build(std::slice::from_ref(&img)).unwrap();
        let c = CompositorConfig { paste_ratio: 1.0, ..cfg() };
        let plan = propose_placements(&img, &bank, &c, &mut rng::stream(4)).unwrap();
        for p in &plan.placements {
            assert_eq!(&p.record().resolve(&bank).unwrap(), p);
        }
    }
}
