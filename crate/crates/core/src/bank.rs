//! Pool of every annotated instance in a training set, used as paste templates.

use std::io::{BufRead, Write};
use std::path::Path;

use base64::Engine;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{extract_instances, Instance, LabeledImage};
use crate::error::{Error, Result};
use crate::geometry::{BBox, Mask, Transform};

#[derive(Clone, Debug)]
pub struct InstanceBank {
    entries: Vec<Instance>,
    /// Entry indices ordered by non-decreasing area (ties by index).
    area_index: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TemplateFilter {
    pub area_min: usize,
    pub area_max: usize,
    pub exclude_source: Option<String>,
}

impl TemplateFilter {
    pub fn any() -> Self {
        TemplateFilter {
            area_min: 0,
            area_max: usize::MAX,
            exclude_source: None,
        }
    }

    pub fn area(area_min: usize, area_max: usize) -> Self {
        TemplateFilter {
            area_min,
            area_max,
            exclude_source: None,
        }
    }

    pub fn accepts(&self, inst: &Instance) -> bool {
        inst.area >= self.area_min
            && inst.area <= self.area_max
            && self
                .exclude_source
                .as_deref()
                .is_none_or(|s| s != inst.source_id)
    }
}

impl InstanceBank {
    pub fn build(dataset: &[LabeledImage]) -> Result<Self> {
        Self::from_entries(dataset.iter().flat_map(extract_instances).collect())
    }

    pub fn from_entries(entries: Vec<Instance>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::EmptyBank);
        }
        let mut area_index: Vec<usize> = (0..entries.len()).collect();
        area_index.sort_by_key(|&i| (entries[i].area, i));
        Ok(InstanceBank {
            entries,
            area_index,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[Instance] {
        &self.entries
    }

    pub fn area_index(&self) -> &[usize] {
        &self.area_index
    }

    pub fn find(&self, source_id: &str, label: u16) -> Option<&Instance> {
        self.entries
            .iter()
            .find(|e| e.label == label && e.source_id == source_id)
    }

    /// Entries passing `filter`, in area order.
    pub fn candidates(&self, filter: &TemplateFilter) -> Vec<usize> {
        if filter.area_min > filter.area_max {
            return Vec::new();
        }
        let lo = self
            .area_index
            .partition_point(|&i| self.entries[i].area < filter.area_min);
        let hi = self
            .area_index
            .partition_point(|&i| self.entries[i].area <= filter.area_max);
        self.area_index[lo..hi.max(lo)]
            .iter()
            .copied()
            .filter(|&i| filter.accepts(&self.entries[i]))
            .collect()
    }

    /// Uniform draw among the entries passing `filter`.
    pub fn sample<R: Rng + ?Sized>(&self, filter: &TemplateFilter, rng: &mut R) -> Result<&Instance> {
        let cands = self.candidates(filter);
        if cands.is_empty() {
            return Err(Error::NoCandidate);
        }
        Ok(&self.entries[cands[rng.random_range(0..cands.len())]])
    }

    pub fn save_jsonl(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        for e in &self.entries {
            let line = serde_json::to_string(&BankRecord::from(e))
                .map_err(|e| Error::Malformed(e.to_string()))?;
            writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load_jsonl(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut entries = Vec::new();
        for line in std::io::BufReader::new(file).lines() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: BankRecord =
                serde_json::from_str(&line).map_err(|e| Error::Malformed(e.to_string()))?;
            entries.push(rec.try_into()?);
        }
        Self::from_entries(entries)
    }
}

/// One line of the bank cache file.
#[derive(Serialize, Deserialize)]
struct BankRecord {
    source_id: String,
    label: u16,
    bbox: BBox,
    centroid: (f64, f64),
    area: usize,
    /// Base64 of one byte (0/1) per bbox cell.
    mask: String,
    /// Base64 of the RGB bytes over the bbox.
    pixels: String,
}

impl From<&Instance> for BankRecord {
    fn from(e: &Instance) -> Self {
        let b64 = base64::engine::general_purpose::STANDARD;
        let bits: Vec<u8> = e.mask.bits().iter().map(|&b| b as u8).collect();
        BankRecord {
            source_id: e.source_id.clone(),
            label: e.label,
            bbox: e.bbox,
            centroid: e.centroid,
            area: e.area,
            mask: b64.encode(bits),
            pixels: b64.encode(&e.pixels),
        }
    }
}

impl TryFrom<BankRecord> for Instance {
    type Error = Error;

    fn try_from(r: BankRecord) -> Result<Self> {
        let b64 = base64::engine::general_purpose::STANDARD;
        let bad = |what: &str| Error::Malformed(format!("bank record {}#{}: {what}", r.source_id, r.label));
        let bits = b64.decode(&r.mask).map_err(|_| bad("mask encoding"))?;
        let pixels = b64.decode(&r.pixels).map_err(|_| bad("pixel encoding"))?;
        let cells = r.bbox.w * r.bbox.h;
        if bits.len() != cells || pixels.len() != cells * 3 {
            return Err(bad("extent"));
        }
        let mask = Mask::from_bits(r.bbox.w, r.bbox.h, bits.iter().map(|&b| b != 0).collect());
        if mask.area() != r.area || r.area == 0 {
            return Err(bad("area"));
        }
        Ok(Instance {
            label: r.label,
            source_id: r.source_id,
            bbox: r.bbox,
            mask,
            pixels,
            centroid: r.centroid,
            area: r.area,
        })
    }
}

/// Random flip/quarter-turn: each flip with probability 1/2, each of the four
/// rotations with probability 1/4.
pub fn random_transform<R: Rng + ?Sized>(rng: &mut R) -> Transform {
    Transform {
        flip_h: rng.random_bool(0.5),
        flip_v: rng.random_bool(0.5),
        rot90: rng.random_range(0..4u8),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn image_with_blocks(id: &str, sizes: &[usize]) -> LabeledImage {
        let w = 64;
        let h = 8 * sizes.len().max(1);
        let mut labels = vec![0u16; w * h];
        for (k, &n) in sizes.iter().enumerate() {
            for i in 0..n {
                labels[(k * 8 + i / 8) * w + i % 8] = (k + 1) as u16;
            }
        }
        LabeledImage::new(id, w, h, vec![9; w * h * 3], labels).unwrap()
    }

    #[test]
    fn counts_all_instances() {
        let a = image_with_blocks("a", &[3, 4, 5]);
        let b = image_with_blocks("b", &[1, 2, 3, 4, 5]);
        let bank = InstanceBank::build(&[a, b]).unwrap();
        assert_eq!(bank.len(), 8);
        assert_eq!(bank.entries().iter().filter(|e| e.source_id == "b").count(), 5);
    }

    #[test]
    fn background_only_dataset_is_an_error() {
        let img = LabeledImage::new("z", 4, 4, vec![0; 48], vec![0; 16]).unwrap();
        assert!(matches!(InstanceBank::build(&[img]), Err(Error::EmptyBank)));
    }

    #[test]
    fn singleton_filter_returns_that_entry() {
        let bank = InstanceBank::build(&[image_with_blocks("a", &[3, 7, 12])]).unwrap();
        let mut r = rng::stream(1);
        let got = bank.sample(&TemplateFilter::area(7, 7), &mut r).unwrap();
        assert_eq!(got.area, 7);
    }

    #[test]
    fn impossible_filter_is_no_candidate() {
        let bank = InstanceBank::build(&[image_with_blocks("a", &[3, 7])]).unwrap();
        let mut r = rng::stream(1);
        let f = TemplateFilter::area(1_000_000_000, usize::MAX);
        assert!(matches!(bank.sample(&f, &mut r), Err(Error::NoCandidate)));
    }

    #[test]
    fn exclude_source() {
        let bank =
            InstanceBank::build(&[image_with_blocks("a", &[3]), image_with_blocks("b", &[3])]).unwrap();
        let f = TemplateFilter {
            exclude_source: Some("a".into()),
            ..TemplateFilter::any()
        };
        let mut r = rng::stream(3);
        for _ in 0..20 {
            assert_eq!(bank.sample(&f, &mut r).unwrap().source_id, "b");
        }
    }

    #[test]
    fn same_seed_same_sequence() {
        let bank = InstanceBank::build(&[image_with_blocks("a", &[1, 2, 3, 4, 5, 6])]).unwrap();
        let draw = |seed| {
            let mut r = rng::stream(seed);
            (0..50)
                .map(|_| bank.sample(&TemplateFilter::any(), &mut r).unwrap().label)
                .collect::<Vec<_>>()
        };
        assert_eq!(draw(11), draw(11));
    }

    #[test]
    fn uniform_over_ten_entries() {
        let bank =
            InstanceBank::build(&[image_with_blocks("a", &[1, 2, 3, 4, 5, 6, 7, 8, 9, 10])]).unwrap();
        let mut r = rng::stream(2024);
        let mut counts = [0usize; 10];
        for _ in 0..10_000 {
            let e = bank.sample(&TemplateFilter::any(), &mut r).unwrap();
            counts[e.label as usize - 1] += 1;
        }
        for c in counts {
            let freq = c as f64 / 10_000.0;
            assert!((freq - 0.1).abs() <= 0.05, "frequency {freq}");
        }
    }

    #[test]
    fn jsonl_cache_round_trip() {
        let bank = InstanceBank::build(&[image_with_blocks("a", &[3, 9, 17])]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bank.jsonl");
        bank.save_jsonl(&p).unwrap();
        let back = InstanceBank::load_jsonl(&p).unwrap();
        assert_eq!(back.entries(), bank.entries());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn area_index_is_sorted_permutation(sizes in proptest::collection::vec(1usize..40, 1..12)) {
                let bank = InstanceBank::build(&[image_with_blocks("p", &sizes)]).unwrap();
                let idx = bank.area_index();
                let mut sorted = idx.to_vec();
                sorted.sort();
                prop_assert_eq!(sorted, (0..bank.len()).collect::<Vec<_>>());
                for w in idx.windows(2) {
                    prop_assert!(bank.entries()[w[0]].area <= bank.entries()[w[1]].area);
                }
            }

            #[test]
            fn samples_satisfy_filter(
                sizes in proptest::collection::vec(1usize..40, 1..12),
                lo in 0usize..40,
                span in 0usize..40,
                seed in any::<u64>(),
            ) {
                let bank = InstanceBank::build(&[image_with_blocks("p", &sizes)]).unwrap();
                let f = TemplateFilter::area(lo, lo + span);
                let mut r = rng::stream(seed);
                match bank.sample(&f, &mut r) {
                    Ok(e) => prop_assert!(f.accepts(e)),
                    Err(Error::NoCandidate) => prop_assert!(bank.entries().iter().all(|e| !f.accepts(e))),
                    Err(e) => prop_assert!(false, "unexpected {e}"),
                }
            }
        }
    }
}
