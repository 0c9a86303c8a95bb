//! Smoothing GAN: a gated-convolution auto-encoder generator with a
//! foreground similarity encoder at its bottleneck, and a spectrally
//! normalized patch discriminator trained with a triplet objective.

mod fse;
mod loss;
mod network;
mod smooth;
mod train;

pub use fse::{fse, FseOutput};
pub use loss::{
    adversarial_loss, compose_on_tape, discriminator_loss, generator_loss, loss_d, loss_g,
    patch_distance, triplet_hinge, GeneratorLoss,
};
pub use network::{
    discriminator_forward, downsample_mask, generator_forward, DiscVars, GanParams, GenVars,
};
pub use smooth::smooth;
pub use train::{sample_batch, train, write_metrics_csv, StepMetrics, TrainBatch, TrainOutcome};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Mask;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GanConfig {
    /// Triplet margin.
    pub margin: f64,
    /// Weight of the reconstruction term.
    pub lambda: f64,
    pub base_channels: usize,
    pub disc_channels: usize,
    /// Edge of the square training crop.
    pub crop: usize,
    pub steps: usize,
    pub lr_g: f64,
    pub lr_d: f64,
    pub seed: u64,
    /// Power iterations per discriminator update.
    pub spectral_iterations: usize,
}

impl Default for GanConfig {
    fn default() -> Self {
        GanConfig {
            margin: 1.0,
            lambda: 10.0,
            base_channels: 16,
            disc_channels: 16,
            crop: 64,
            steps: 2000,
            lr_g: 1e-4,
            lr_d: 1e-4,
            seed: 0,
            spectral_iterations: 1,
        }
    }
}

impl GanConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin > 0.0) {
            return Err(Error::InvalidConfig(format!("margin {} must be > 0", self.margin)));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::InvalidConfig(format!("lambda {} must be >= 0", self.lambda)));
        }
        if self.crop == 0 || self.crop % 16 != 0 {
            return Err(Error::InvalidConfig(format!(
                "crop {} must be a positive multiple of 16 (the discriminator stride)",
                self.crop
            )));
        }
        if self.base_channels == 0 || self.disc_channels == 0 || self.spectral_iterations == 0 {
            return Err(Error::InvalidConfig("channel counts and spectral_iterations must be >= 1".into()));
        }
        if !(self.lr_g > 0.0 && self.lr_d > 0.0) {
            return Err(Error::InvalidConfig("learning rates must be > 0".into()));
        }
        Ok(())
    }
}

/// `g` inside `m`, `u` elsewhere, on `1×C×H×W` tensors. Pixels outside the
/// mask are copied, not recomputed.
pub fn compose(u: &Tensor, g: &Tensor, m: &Mask) -> Result<Tensor> {
    let s = u.shape();
    if s != g.shape() || s.len() != 4 || s[2] != m.height() || s[3] != m.width() {
        return Err(Error::DimensionMismatch(format!(
            "compose: u {:?}, g {:?}, mask {}x{}",
            s,
            g.shape(),
            m.width(),
            m.height()
        )));
    }
    let plane = s[2] * s[3];
    let mut out = u.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        if m.bits()[i % plane] {
            *v = g.data()[i];
        }
    }
    Ok(out)
}

/// `1×3×H×W` tensor with values `byte / 255`.
pub fn image_tensor(pixels: &[u8], width: usize, height: usize) -> Tensor {
    let plane = width * height;
    let mut data = vec![0.0; 3 * plane];
    for (i, px) in pixels.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * plane + i] = px[c] as f64 / 255.0;
        }
    }
    Tensor::new(&[1, 3, height, width], data).expect("extent matches")
}

/// `1×1×H×W` tensor of 0/1.
pub fn mask_tensor(m: &Mask) -> Tensor {
    Tensor::new(
        &[1, 1, m.height(), m.width()],
        m.bits().iter().map(|&b| b as u8 as f64).collect(),
    )
    .expect("extent matches")
}

/// Rounds `v * 255` half up after clamping to `[0, 1]`.
pub fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn compose_extremes_and_checkerboard() {
        let mut r = rng::stream(1);
        let u = Tensor::uniform(&[1, 3, 4, 6], 0.0, 1.0, &mut r);
        let g = Tensor::uniform(&[1, 3, 4, 6], 0.0, 1.0, &mut r);
        assert_eq!(compose(&u, &g, &Mask::new(6, 4)).unwrap(), u);
        assert_eq!(compose(&u, &g, &Mask::from_bits(6, 4, vec![true; 24])).unwrap(), g);
        let cb = Mask::from_bits(6, 4, (0..24).map(|i| (i % 6 + i / 6) % 2 == 0).collect());
        let s = compose(&u, &g, &cb).unwrap();
        for c in 0..3 {
            for y in 0..4 {
                for x in 0..6 {
                    let i = (c * 4 + y) * 6 + x;
                    let want = if (x + y) % 2 == 0 { g.data()[i] } else { u.data()[i] };
                    assert_eq!(s.data()[i], want);
                }
            }
        }
        assert!(compose(&u, &g, &Mask::new(5, 4)).is_err());
    }

    #[test]
    fn byte_rounding() {
        assert_eq!(to_byte(0.0), 0);
        assert_eq!(to_byte(1.0), 255);
        assert_eq!(to_byte(1.5 / 255.0), 2);
        assert_eq!(to_byte(-3.0), 0);
    }

    #[test]
    fn config_checks() {
        assert!(GanConfig::default().validate().is_ok());
        assert!(GanConfig { margin: 0.0, ..GanConfig::default() }.validate().is_err());
        assert!(GanConfig { crop: 40, ..GanConfig::default() }.validate().is_err());
    }
}
