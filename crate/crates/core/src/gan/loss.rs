//! Triplet objectives. `d(P, Q)` is the mean absolute difference of two
//! discriminator score maps; the anchor and positive are real crops and the
//! negative is the smoothed composite.

use super::network::{discriminator_forward, DiscVars};
use crate::error::{Error, Result};
use crate::geometry::Mask;
use crate::tensor::{Tape, Tensor, Var};

/// `mean |a - b|`.
pub fn patch_distance(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let d = tape.sub(a, b)?;
    let d = tape.abs(d)?;
    tape.mean(d)
}

/// `max(0, d(a, p) - d(a, n) + margin)` on score maps.
pub fn triplet_hinge(tape: &mut Tape, a: Var, p: Var, n: Var, margin: f64) -> Result<Var> {
    let dp = patch_distance(tape, a, p)?;
    let dn = patch_distance(tape, a, n)?;
    let diff = tape.sub(dp, dn)?;
    let shifted = tape.add_scalar(diff, margin)?;
    tape.relu(shifted)
}

/// `u + m ⊙ (g - u)`; equals `g` inside the mask and `u` outside.
pub fn compose_on_tape(tape: &mut Tape, u: Var, g: Var, m: &Mask) -> Result<Var> {
    let s = tape.value(u).shape().to_vec();
    if s.len() != 4 || s[2] != m.height() || s[3] != m.width() {
        return Err(Error::DimensionMismatch(format!(
            "compose: image {s:?}, mask {}x{}",
            m.width(),
            m.height()
        )));
    }
    let plane = m.width() * m.height();
    let data = (0..s.iter().product::<usize>())
        .map(|i| m.bits()[i % plane] as u8 as f64)
        .collect();
    let mv = tape.constant(Tensor::new(&s, data)?);
    let delta = tape.sub(g, u)?;
    let masked = tape.mul(mv, delta)?;
    tape.add(u, masked)
}

/// Discriminator objective on images.
pub fn discriminator_loss(tape: &mut Tape, d: &DiscVars, anchor: Var, positive: Var, negative: Var, margin: f64) -> Result<Var> {
    let da = discriminator_forward(tape, d, anchor)?;
    let dp = discriminator_forward(tape, d, positive)?;
    let dn = discriminator_forward(tape, d, negative)?;
    triplet_hinge(tape, da, dp, dn, margin)
}

/// `d(Da, Ds) - d(Da, Dp)` on images.
pub fn adversarial_loss(tape: &mut Tape, d: &DiscVars, anchor: Var, positive: Var, smoothed: Var) -> Result<Var> {
    let da = discriminator_forward(tape, d, anchor)?;
    let dp = discriminator_forward(tape, d, positive)?;
    let ds = discriminator_forward(tape, d, smoothed)?;
    let dn = patch_distance(tape, da, ds)?;
    let dpos = patch_distance(tape, da, dp)?;
    tape.sub(dn, dpos)
}

#[derive(Clone, Copy, Debug)]
pub struct GeneratorLoss {
    pub total: Var,
    pub adversarial: Var,
    pub reconstruction: Var,
}

/// `adversarial + lambda * mean |u - g|`.
#[allow(clippy::too_many_arguments)]
pub fn generator_loss(
    tape: &mut Tape,
    d: &DiscVars,
    u: Var,
    g: Var,
    smoothed: Var,
    anchor: Var,
    positive: Var,
    lambda: f64,
) -> Result<GeneratorLoss> {
    let adversarial = adversarial_loss(tape, d, anchor, positive, smoothed)?;
    let reconstruction = patch_distance(tape, u, g)?;
    let weighted = tape.scale(reconstruction, lambda)?;
    let total = tape.add(adversarial, weighted)?;
    Ok(GeneratorLoss {
        total,
        adversarial,
        reconstruction,
    })
}

fn mean_abs_diff(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.numel() as f64)
}

/// Discriminator loss from precomputed score maps.
pub fn loss_d(da: &Tensor, dp: &Tensor, ds: &Tensor, margin: f64) -> Result<f64> {
    Ok((mean_abs_diff(da, dp)? - mean_abs_diff(da, ds)? + margin).max(0.0))
}

/// Generator loss from precomputed score maps and images.
pub fn loss_g(da: &Tensor, dp: &Tensor, ds: &Tensor, u: &Tensor, g: &Tensor, lambda: f64) -> Result<f64> {
    Ok(mean_abs_diff(da, ds)? - mean_abs_diff(da, dp)? + lambda * mean_abs_diff(u, g)?)
}
