use std::io::Write;
use std::path::Path;

use rand::Rng;

use super::loss::{compose_on_tape, discriminator_loss, generator_loss};
use super::network::{generator_forward, DiscVars, GanParams, GenVars};
use super::{image_tensor, GanConfig};
use crate::bank::InstanceBank;
use crate::compositor::{apply_plan, propose_placements, CompositorConfig};
use crate::dataset::LabeledImage;
use crate::error::{Error, Result};
use crate::geometry::Mask;
use crate::rng;
use crate::tensor::{Adam, AdamConfig, Tape, Tensor};

const CROP_ATTEMPTS: usize = 50;
const PLAN_ATTEMPTS: usize = 20;

/// One training example: a pasted crop with its masks and two real crops.
#[derive(Clone, Debug)]
pub struct TrainBatch {
    pub u: Tensor,
    pub template_mask: Mask,
    /// Visible original instances, disjoint from the template mask.
    pub original_mask: Mask,
    pub anchor: Tensor,
    pub positive: Tensor,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepMetrics {
    pub step: usize,
    pub loss_d: f64,
    pub loss_adv: f64,
    pub recon: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: GanParams,
    pub metrics: Vec<StepMetrics>,
}

fn random_crop<R: Rng + ?Sized>(dataset: &[&LabeledImage], crop: usize, rng: &mut R) -> Result<LabeledImage> {
    let img = dataset[rng.random_range(0..dataset.len())];
    let x = rng.random_range(0..=img.width() - crop);
    let y = rng.random_range(0..=img.height() - crop);
    img.crop(x, y, crop, crop)
}

fn crop_tensor(img: &LabeledImage) -> Tensor {
    image_tensor(img.pixels(), img.width(), img.height())
}

/// Draws a crop holding at least one instance, pastes templates into it and
/// pairs it with two independent real crops.
pub fn sample_batch<R: Rng + ?Sized>(
    dataset: &[LabeledImage],
    bank: &InstanceBank,
    compositor: &CompositorConfig,
    crop: usize,
    rng: &mut R,
) -> Result<TrainBatch> {
    let usable: Vec<&LabeledImage> = dataset
        .iter()
        .filter(|d| d.width() >= crop && d.height() >= crop)
        .collect();
    if usable.is_empty() {
        return Err(Error::InvalidConfig(format!("no training image is at least {crop}x{crop}")));
    }
    let mut fallback = None;
    let mut plans = 0;
    for _ in 0..CROP_ATTEMPTS {
        let c = random_crop(&usable, crop, rng)?;
        if c.labels().iter().all(|&l| l == 0) {
            continue;
        }
        let plan = propose_placements(&c, bank, compositor, rng)?;
        plans += 1;
        if plan.placements.is_empty() && plans < PLAN_ATTEMPTS {
            fallback.get_or_insert(c);
            continue;
        }
        let pasted = apply_plan(&c, &plan)?;
        let fallback_used = plan.placements.is_empty();
        let template_mask = plan.template_mask;
        let original_mask = Mask::from_bits(
            crop,
            crop,
            pasted
                .labels()
                .iter()
                .zip(template_mask.bits())
                .map(|(&l, &t)| l != 0 && !t)
                .collect(),
        );
        if fallback_used {
            log::debug!("no placement accepted in {plans} crops");
        }
        return Ok(TrainBatch {
            u: crop_tensor(&pasted),
            template_mask,
            original_mask,
            anchor: crop_tensor(&random_crop(&usable, crop, rng)?),
            positive: crop_tensor(&random_crop(&usable, crop, rng)?),
        });
    }
    let c = fallback.ok_or(Error::NoAnchor)?;
    let original_mask = c.foreground_mask();
    Ok(TrainBatch {
        u: crop_tensor(&c),
        template_mask: Mask::new(crop, crop),
        original_mask,
        anchor: crop_tensor(&random_crop(&usable, crop, rng)?),
        positive: crop_tensor(&random_crop(&usable, crop, rng)?),
    })
}

/// Alternating updates from freshly initialised weights.
pub fn train(
    dataset: &[LabeledImage],
    bank: &InstanceBank,
    compositor: &CompositorConfig,
    cfg: &GanConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut r = rng::stream(cfg.seed);
    let params = GanParams::init(cfg, &mut r)?;
    train_from(params, dataset, bank, compositor, cfg, &mut r)
}

fn train_from<R: Rng + ?Sized>(
    mut params: GanParams,
    dataset: &[LabeledImage],
    bank: &InstanceBank,
    compositor: &CompositorConfig,
    cfg: &GanConfig,
    r: &mut R,
) -> Result<TrainOutcome> {
    let mut opt_g = Adam::new(AdamConfig::with_lr(cfg.lr_g), params.generator.iter());
    let mut opt_d = Adam::new(AdamConfig::with_lr(cfg.lr_d), params.discriminator.iter());
    let mut metrics = Vec::with_capacity(cfg.steps);
    for step in 1..=cfg.steps {
        let b = sample_batch(dataset, bank, compositor, cfg.crop, r)?;

        let mut gt = Tape::new();
        let gv = GenVars::bind(&mut gt, &params, true);
        let u = gt.constant(b.u.clone());
        let g = generator_forward(&mut gt, &gv, u, &b.template_mask, &b.original_mask)?;
        let s = compose_on_tape(&mut gt, u, g, &b.template_mask)?;

        let uv = params.advance_spectral()?;
        let loss_d = {
            let mut dt = Tape::new();
            let dv = DiscVars::bind(&mut dt, &params, &uv, true)?;
            let xa = dt.constant(b.anchor.clone());
            let xp = dt.constant(b.positive.clone());
            let xs = dt.constant(gt.value(s).clone());
            let l = discriminator_loss(&mut dt, &dv, xa, xp, xs, cfg.margin)?;
            let grads = dt.backward(l)?;
            let gs: Vec<Option<&Tensor>> = dv.vars.iter().map(|&v| grads.get(v)).collect();
            opt_d.update(params.discriminator.iter_mut(), &gs);
            dt.value(l).data()[0]
        };

        let dv = DiscVars::bind(&mut gt, &params, &uv, false)?;
        let xa = gt.constant(b.anchor);
        let xp = gt.constant(b.positive);
        let lg = generator_loss(&mut gt, &dv, u, g, s, xa, xp, cfg.lambda)?;
        let grads = gt.backward(lg.total)?;
        let gs: Vec<Option<&Tensor>> = gv.vars.iter().map(|&v| grads.get(v)).collect();
        opt_g.update(params.generator.iter_mut(), &gs);

        let m = StepMetrics {
            step,
            loss_d,
            loss_adv: gt.value(lg.adversarial).data()[0],
            recon: gt.value(lg.reconstruction).data()[0],
        };
        if params.generator.iter().chain(&params.discriminator).any(|t| !t.is_finite()) {
            return Err(Error::NonFinite(format!("weights after step {step}")));
        }
        if step % 100 == 0 {
            log::info!(
                "step {step}: loss_d {:.4} loss_adv {:.4} recon {:.4}",
                m.loss_d,
                m.loss_adv,
                m.recon
            );
        }
        metrics.push(m);
    }
    Ok(TrainOutcome { params, metrics })
}

/// Writes `step,loss_d,loss_adv,recon` rows.
pub fn write_metrics_csv(path: &Path, metrics: &[StepMetrics]) -> Result<()> {
    let mut out = String::from("step,loss_d,loss_adv,recon\n");
    for m in metrics {
        out.push_str(&format!("{},{},{},{}\n", m.step, m.loss_d, m.loss_adv, m.recon));
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(out.as_bytes()))
        .map_err(|e| Error::io(path, e))
}
