//! Seeded batch augmentation over a directory of image/label pairs, with a
//! JSON-lines manifest that is enough to replay and audit every sample.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bank::InstanceBank;
use crate::compositor::{apply_plan, propose_placements, CompositorConfig, PlacementPlan, PlacementRecord};
use crate::dataset::{discover_pairs, extract_instances, label_path_for, load_labeled_image, save_labeled_image, LabeledImage};
use crate::error::{Error, Result};
use crate::gan::{smooth, GanConfig, GanParams};
use crate::perturb::{perturb_background, PerturbConfig, ShuffleRecord};
use crate::rng;
use crate::ssd::{check_ssd, SsdConfig, Violation};
use crate::tensor::load_checkpoint;

pub const SEED_ENV: &str = "INSMIX_SEED";
pub const MANIFEST_NAME: &str = "manifest.jsonl";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Paste,
    Perturb,
    Smooth,
}

/// Paste-stage options; the SSD thresholds live at the top level of the
/// pipeline config.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PasteOptions {
    pub paste_ratio: f64,
    pub max_attempts: usize,
    pub occlusion_cap: f64,
    pub template_transforms: bool,
}

impl Default for PasteOptions {
    fn default() -> Self {
        let d = CompositorConfig::with_ssd(SsdConfig::DEFAULT);
        PasteOptions {
            paste_ratio: d.paste_ratio,
            max_attempts: d.max_attempts,
            occlusion_cap: d.occlusion_cap,
            template_transforms: d.template_transforms,
        }
    }
}

fn default_repetitions() -> usize {
    4
}

fn default_stages() -> Vec<Stage> {
    vec![Stage::Paste, Stage::Perturb, Stage::Smooth]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub input_dir: PathBuf,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_repetitions")]
    pub repetitions: usize,
    #[serde(default = "default_stages")]
    pub stages: Vec<Stage>,
    pub ssd: SsdConfig,
    #[serde(default)]
    pub paste: PasteOptions,
    #[serde(default)]
    pub perturb: PerturbConfig,
    #[serde(default)]
    pub gan: GanConfig,
    #[serde(default)]
    pub gan_checkpoint: Option<PathBuf>,
}

impl PipelineConfig {
    /// Parses a config file. Relative paths are taken relative to the file's
    /// directory; `INSMIX_SEED`, when set, replaces `seed`.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: PipelineConfig =
            serde_json::from_str(&text).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let rebase = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        rebase(&mut cfg.input_dir);
        rebase(&mut cfg.output_dir);
        if let Some(c) = cfg.gan_checkpoint.as_mut() {
            rebase(c);
        }
        if let Ok(s) = std::env::var(SEED_ENV) {
            cfg.seed = s
                .trim()
                .parse()
                .map_err(|_| Error::InvalidConfig(format!("{SEED_ENV}={s:?} is not a 64-bit unsigned integer")))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::InvalidConfig("stages must not be empty".into()));
        }
        for (i, s) in self.stages.iter().enumerate() {
            if self.stages[..i].contains(s) {
                return Err(Error::InvalidConfig(format!("stage {s:?} listed twice")));
            }
        }
        self.compositor().validate()?;
        self.perturb.validate()?;
        self.gan.validate()
    }

    pub fn compositor(&self) -> CompositorConfig {
        CompositorConfig {
            paste_ratio: self.paste.paste_ratio,
            max_attempts: self.paste.max_attempts,
            occlusion_cap: self.paste.occlusion_cap,
            template_transforms: self.paste.template_transforms,
            ssd: self.ssd,
        }
    }

    /// Generator weights for the smooth stage, if it is configured.
    pub fn load_generator(&self) -> Result<Option<GanParams>> {
        if !self.stages.contains(&Stage::Smooth) {
            return Ok(None);
        }
        let path = self.gan_checkpoint.as_ref().ok_or(Error::MissingCheckpoint)?;
        if !path.is_file() {
            return Err(Error::MissingCheckpoint);
        }
        let records = load_checkpoint(path)?;
        GanParams::from_records(&records, self.gan.spectral_iterations).map(Some)
    }
}

/// One produced sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub input_id: String,
    pub input_dir: PathBuf,
    pub input_image: PathBuf,
    pub input_labels: PathBuf,
    pub output_image: PathBuf,
    pub output_labels: PathBuf,
    pub image_index: usize,
    pub repetition: usize,
    /// Seed of this sample's random stream.
    pub seed: u64,
    pub stages: Vec<Stage>,
    pub ssd: SsdConfig,
    pub placements: Vec<PlacementRecord>,
    pub shuffle: Option<ShuffleRecord>,
    pub smoothed: bool,
}

/// Loads every input pair of a directory together with its paths.
fn load_inputs(dir: &Path) -> Result<Vec<(PathBuf, PathBuf, LabeledImage)>> {
    discover_pairs(dir)?
        .into_iter()
        .map(|(i, l)| {
            let img = load_labeled_image(&i, &l)?;
            Ok((i, l, img))
        })
        .collect()
}

fn write_manifest(path: &Path, records: &[ManifestRecord]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::Malformed(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    if !path.is_file() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line)
            .map_err(|e| Error::Malformed(format!("{}:{}: {e}", path.display(), n + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

/// Runs the configured stages over every input and repetition, writing
/// `<stem>_aug<r>.png`, its label map and `manifest.jsonl` into the output
/// directory.
pub fn run_augment(cfg: &PipelineConfig) -> Result<Vec<ManifestRecord>> {
    cfg.validate()?;
    let generator = cfg.load_generator()?;
    let inputs = load_inputs(&cfg.input_dir)?;
    if inputs.is_empty() {
        return Err(Error::MissingArtifact(cfg.input_dir.clone()));
    }
    let dataset: Vec<LabeledImage> = inputs.iter().map(|(_, _, img)| img.clone()).collect();
    let bank = if cfg.stages.contains(&Stage::Paste) {
        Some(InstanceBank::build(&dataset)?)
    } else {
        None
    };
    let compositor = cfg.compositor();
    std::fs::create_dir_all(&cfg.output_dir).map_err(|e| Error::io(&cfg.output_dir, e))?;

    let mut records = Vec::new();
    for (index, (image_path, label_path, img)) in inputs.iter().enumerate() {
        for rep in 0..cfg.repetitions {
            let seed = rng::sample_seed(cfg.seed, index as u64, rep as u64);
            let mut r = rng::stream(seed);
            let mut cur = img.clone();
            let mut plan = PlacementPlan::empty(img.width(), img.height());
            let mut shuffle = None;
            let mut smoothed = false;
            for stage in &cfg.stages {
                match stage {
                    Stage::Paste => {
                        let bank = bank.as_ref().expect("bank built for paste");
                        plan = match propose_placements(&cur, bank, &compositor, &mut r) {
                            Ok(p) => p,
                            Err(Error::NoAnchor) => PlacementPlan::empty(img.width(), img.height()),
                            Err(e) => return Err(e),
                        };
                        cur = apply_plan(&cur, &plan)?;
                    }
                    Stage::Perturb => {
                        let (out, rec) = perturb_background(&cur, &cfg.perturb, &mut r)?;
                        cur = out;
                        shuffle = Some(rec);
                    }
                    Stage::Smooth => {
                        let params = generator.as_ref().expect("generator loaded for smooth");
                        cur = smooth(&cur, &plan.template_mask, params)?;
                        smoothed = true;
                    }
                }
            }
            let stem = image_path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| img.id.clone());
            let output_image = cfg.output_dir.join(format!("{stem}_aug{rep}.png"));
            let output_labels = label_path_for(&output_image);
            save_labeled_image(&cur, &output_image, &output_labels)?;
            records.push(ManifestRecord {
                input_id: img.id.clone(),
                input_dir: cfg.input_dir.clone(),
                input_image: image_path.clone(),
                input_labels: label_path.clone(),
                output_image,
                output_labels,
                image_index: index,
                repetition: rep,
                seed,
                stages: cfg.stages.clone(),
                ssd: cfg.ssd,
                placements: plan.records(),
                shuffle,
                smoothed,
            });
        }
    }
    write_manifest(&cfg.output_dir.join(MANIFEST_NAME), &records)?;
    log::info!("wrote {} samples to {}", records.len(), cfg.output_dir.display());
    Ok(records)
}

/// Re-executes the paste and perturb stages of a record from its input. When
/// the sample was smoothed, pixels under the template mask are left as
/// pasted; the returned mask marks them.
pub fn replay(record: &ManifestRecord, input: &LabeledImage, bank: &InstanceBank) -> Result<(LabeledImage, PlacementPlan)> {
    let placements = record
        .placements
        .iter()
        .map(|p| p.resolve(bank))
        .collect::<Result<Vec<_>>>()?;
    let plan = PlacementPlan::from_placements(placements, input.width(), input.height());
    let mut cur = input.clone();
    for stage in &record.stages {
        match stage {
            Stage::Paste => cur = apply_plan(&cur, &plan)?,
            Stage::Perturb => {
                if let Some(s) = &record.shuffle {
                    cur = s.apply(&cur)?;
                }
            }
            Stage::Smooth => {}
        }
    }
    Ok((cur, plan))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Finding {
    pub record: usize,
    pub output_image: PathBuf,
    pub kind: String,
    pub detail: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct VerifyReport {
    pub records: usize,
    pub placements: usize,
    pub violations: Vec<Finding>,
}

impl VerifyReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Audits every record: each placement must re-pass the SSD checks against
/// its anchor in the input image and lie inside the image, and the output
/// must equal a replay of its paste/perturb stages (outside the template
/// region when smoothed).
pub fn run_verify(records: &[ManifestRecord]) -> Result<VerifyReport> {
    let mut report = VerifyReport {
        records: records.len(),
        ..VerifyReport::default()
    };
    let mut inputs: BTreeMap<PathBuf, (InstanceBank, BTreeMap<String, LabeledImage>)> = BTreeMap::new();
    for (ri, rec) in records.iter().enumerate() {
        let mut flag = |kind: &str, detail: String| {
            report.violations.push(Finding {
                record: ri,
                output_image: rec.output_image.clone(),
                kind: kind.into(),
                detail,
            })
        };
        if !inputs.contains_key(&rec.input_dir) {
            let imgs = load_inputs(&rec.input_dir)?;
            let dataset: Vec<LabeledImage> = imgs.iter().map(|(_, _, i)| i.clone()).collect();
            let bank = InstanceBank::build(&dataset)?;
            let by_id = dataset.into_iter().map(|i| (i.id.clone(), i)).collect();
            inputs.insert(rec.input_dir.clone(), (bank, by_id));
        }
        let (bank, by_id) = &inputs[&rec.input_dir];
        let Some(input) = by_id.get(&rec.input_id) else {
            return Err(Error::MissingArtifact(rec.input_image.clone()));
        };
        for path in [&rec.output_image, &rec.output_labels] {
            if !path.is_file() {
                return Err(Error::MissingArtifact(path.clone()));
            }
        }
        let anchors = extract_instances(input);
        for (pi, p) in rec.placements.iter().enumerate() {
            report.placements += 1;
            let placed = match p.resolve(bank) {
                Ok(pl) => pl,
                Err(e) => {
                    flag("template", format!("placement {pi}: {e}"));
                    continue;
                }
            };
            if !placed.template.bbox.fits_in(input.width(), input.height()) {
                flag("bounds", format!("placement {pi}: bbox {:?}", placed.template.bbox));
            }
            let Some(anchor) = anchors.iter().find(|a| a.label == p.anchor_label) else {
                flag("anchor", format!("placement {pi}: anchor {} not in input", p.anchor_label));
                continue;
            };
            let ssd = check_ssd(anchor, &placed.template, placed.template.centroid, &rec.ssd)?;
            for v in &ssd.violated {
                let what = match v {
                    Violation::Scale => format!("f_scale {:.4}", ssd.scale),
                    Violation::Shape => format!("f_shape {:.4}", ssd.shape),
                    Violation::Distance => format!("f_dis {:.4}", ssd.distance),
                };
                flag(&format!("ssd:{v:?}").to_lowercase(), format!("placement {pi}: {what}"));
            }
        }
        let (expected, plan) = match replay(rec, input, bank) {
            Ok(x) => x,
            Err(e) => {
                flag("replay", e.to_string());
                continue;
            }
        };
        let output = load_labeled_image(&rec.output_image, &rec.output_labels)?;
        if (output.width(), output.height()) != (expected.width(), expected.height()) {
            flag("extent", format!("{}x{}", output.width(), output.height()));
            continue;
        }
        if output.labels() != expected.labels() {
            let n = output.labels().iter().zip(expected.labels()).filter(|(a, b)| a != b).count();
            flag("labels", format!("{n} label cells differ from replay"));
        }
        let mut differing = 0;
        for (i, (a, b)) in output.pixels().chunks(3).zip(expected.pixels().chunks(3)).enumerate() {
            let (x, y) = (i % output.width(), i / output.width());
            if a != b && !(rec.smoothed && plan.template_mask.get(x, y)) {
                differing += 1;
            }
        }
        if differing > 0 {
            flag("pixels", format!("{differing} pixels differ from replay outside the template region"));
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{synth_dataset, SynthConfig};

    fn write_inputs(dir: &Path, n: usize) {
        for img in synth_dataset(n, &SynthConfig::default(), 11) {
            let p = dir.join(format!("{}.png", img.id));
            save_labeled_image(&img, &p, &label_path_for(&p)).unwrap();
        }
    }

    fn config(root: &Path, stages: Vec<Stage>) -> PipelineConfig {
        PipelineConfig {
            input_dir: root.join("in"),
            output_dir: root.join("out"),
            seed: 5,
            repetitions: 2,
            stages,
            ssd: SsdConfig::DEFAULT,
            paste: PasteOptions::default(),
            perturb: PerturbConfig::default(),
            gan: GanConfig::default(),
            gan_checkpoint: None,
        }
    }

    fn setup() -> tempfile::TempDir {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir(dir.path().join("in")).unwrap();
        write_inputs(&dir.path().join("in"), 3);
        dir
    }

    #[test]
    fn zero_ratio_paste_is_identity() {
        let dir = setup();
        let mut cfg = config(dir.path(), vec![Stage::Paste]);
        cfg.paste.paste_ratio = 0.0;
        let recs = run_augment(&cfg).unwrap();
        assert_eq!(recs.len(), 6);
        for r in &recs {
            assert!(r.placements.is_empty());
            let a = load_labeled_image(&r.input_image, &r.input_labels).unwrap();
            let b = load_labeled_image(&r.output_image, &r.output_labels).unwrap();
            assert_eq!(a.pixels(), b.pixels());
            assert_eq!(a.labels(), b.labels());
        }
    }

    #[test]
    fn fresh_manifest_verifies_and_edits_are_caught() {
        let dir = setup();
        let cfg = config(dir.path(), vec![Stage::Paste, Stage::Perturb]);
        run_augment(&cfg).unwrap();
        let mut recs = read_manifest(&cfg.output_dir.join(MANIFEST_NAME)).unwrap();
        assert!(recs.iter().any(|r| !r.placements.is_empty()));
        let report = run_verify(&recs).unwrap();
        assert!(report.is_clean(), "{:?}", report.violations);
        assert!(run_verify(&[]).unwrap().is_clean());

        let r = recs.iter_mut().find(|r| !r.placements.is_empty()).unwrap();
        r.placements[0].target[0] += 500;
        let report = run_verify(&recs).unwrap();
        assert!(report.violations.iter().any(|v| v.kind == "ssd:distance"));
    }

    #[test]
    fn smooth_without_checkpoint_fails() {
        let dir = setup();
        let cfg = config(dir.path(), vec![Stage::Smooth]);
        assert!(matches!(run_augment(&cfg), Err(Error::MissingCheckpoint)));
    }

    #[test]
    fn config_parsing() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"input_dir": "in", "output_dir": "out", "ssd": {"epsilon": 3, "rho": 0.5, "delta": 10, "gamma": 120}}"#).unwrap();
        let cfg = PipelineConfig::load(&p).unwrap();
        assert_eq!(cfg.input_dir, dir.path().join("in"));
        assert_eq!(cfg.repetitions, 4);
        assert_eq!(cfg.stages, default_stages());
        std::fs::write(&p, r#"{"input_dir": "in", "output_dir": "out"}"#).unwrap();
        assert!(matches!(PipelineConfig::load(&p), Err(Error::InvalidConfig(_))));
        std::fs::write(&p, r#"{"input_dir": "in", "output_dir": "out", "stages": [], "ssd": {"epsilon": 3, "rho": 0.5, "delta": 10, "gamma": 120}}"#).unwrap();
        assert!(matches!(PipelineConfig::load(&p), Err(Error::InvalidConfig(_))));
    }
}
