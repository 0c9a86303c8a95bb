use rand::Rng;

use super::{mask_tensor, GanConfig};
use crate::error::{Error, Result};
use crate::geometry::Mask;
use crate::tensor::{power_iteration, ConvSpec, SpectralState, Tape, Tensor, Var};

use super::fse::fse;

/// Power-iteration steps used to settle the spectral estimates of freshly
/// initialised discriminator weights.
const SPECTRAL_WARMUP: usize = 200;

#[derive(Clone, Copy)]
struct GatedLayer {
    name: &'static str,
    cin: usize,
    cout: usize,
    spec: ConvSpec,
}

fn generator_layers(c: usize) -> [GatedLayer; 8] {
    let l = |name, cin, cout, spec| GatedLayer { name, cin, cout, spec };
    [
        l("enc1", 4, c, ConvSpec::same(3)),
        l("enc2", c, 2 * c, ConvSpec::new(2, 1, 1)),
        l("enc3", 2 * c, 2 * c, ConvSpec::new(2, 1, 1)),
        l("mid1", 2 * c, 2 * c, ConvSpec::new(1, 2, 2)),
        l("mid2", 2 * c, 2 * c, ConvSpec::new(1, 4, 4)),
        l("dec1", 4 * c, 2 * c, ConvSpec::same(3)),
        l("dec2", 2 * c, c, ConvSpec::same(3)),
        l("dec3", c, c, ConvSpec::same(3)),
    ]
}

/// Names and shapes of the generator tensors in binding order.
fn generator_layout(c: usize) -> Vec<(String, Vec<usize>)> {
    let mut out = Vec::new();
    for l in generator_layers(c) {
        let k = vec![l.cout, l.cin, 3, 3];
        out.push((format!("g.{}.wf", l.name), k.clone()));
        out.push((format!("g.{}.bf", l.name), vec![l.cout]));
        out.push((format!("g.{}.wg", l.name), k));
        out.push((format!("g.{}.bg", l.name), vec![l.cout]));
    }
    out.push(("g.out.w".into(), vec![3, c, 3, 3]));
    out.push(("g.out.b".into(), vec![3]));
    out
}

fn discriminator_layout(c: usize) -> Vec<(String, Vec<usize>)> {
    let chans = [3, c, 2 * c, 4 * c, 1];
    let mut out = Vec::new();
    for i in 0..4 {
        out.push((format!("d.{i}.w"), vec![chans[i + 1], chans[i], 4, 4]));
        out.push((format!("d.{i}.b"), vec![chans[i + 1]]));
    }
    out
}

fn init_tensor<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor {
    if shape.len() == 1 {
        return Tensor::zeros(shape);
    }
    let fan_in: usize = shape[1..].iter().product();
    Tensor::randn(shape, 1.0 / (fan_in as f64).sqrt(), rng)
}

/// Generator and discriminator weights plus the discriminator's spectral
/// estimates.
#[derive(Clone, Debug, PartialEq)]
pub struct GanParams {
    pub base_channels: usize,
    pub disc_channels: usize,
    pub generator: Vec<Tensor>,
    /// Weight and bias per layer, interleaved.
    pub discriminator: Vec<Tensor>,
    pub spectral: Vec<SpectralState>,
}

impl GanParams {
    pub fn init<R: Rng + ?Sized>(cfg: &GanConfig, rng: &mut R) -> Result<Self> {
        let generator = generator_layout(cfg.base_channels)
            .iter()
            .map(|(_, s)| init_tensor(s, rng))
            .collect();
        let discriminator: Vec<Tensor> = discriminator_layout(cfg.disc_channels)
            .iter()
            .map(|(_, s)| init_tensor(s, rng))
            .collect();
        let mut spectral = Vec::new();
        for w in discriminator.iter().step_by(2) {
            let mut st = SpectralState::random(w.shape()[0], rng);
            power_iteration(w, &mut st.u, SPECTRAL_WARMUP)?;
            st.iterations_per_step = cfg.spectral_iterations;
            spectral.push(st);
        }
        Ok(GanParams {
            base_channels: cfg.base_channels,
            disc_channels: cfg.disc_channels,
            generator,
            discriminator,
            spectral,
        })
    }

    /// Advances every spectral estimate by its per-step iteration count and
    /// returns the `(u, v)` pairs to normalise with.
    pub fn advance_spectral(&mut self) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
        let mut out = Vec::with_capacity(self.spectral.len());
        for (st, w) in self.spectral.iter_mut().zip(self.discriminator.iter().step_by(2)) {
            let (v, _) = power_iteration(w, &mut st.u, st.iterations_per_step)?;
            out.push((st.u.clone(), v));
        }
        Ok(out)
    }

    pub fn to_records(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = generator_layout(self.base_channels)
            .into_iter()
            .zip(&self.generator)
            .map(|((n, _), t)| (n, t.clone()))
            .collect();
        out.extend(
            discriminator_layout(self.disc_channels)
                .into_iter()
                .zip(&self.discriminator)
                .map(|((n, _), t)| (n, t.clone())),
        );
        for (i, st) in self.spectral.iter().enumerate() {
            let u = Tensor::new(&[st.u.len()], st.u.clone()).expect("vector");
            out.push((format!("d.{i}.u"), u));
        }
        out
    }

    /// Rebuilds parameters from checkpoint records; channel widths are read
    /// off the first layer of each network.
    pub fn from_records(records: &[(String, Tensor)], spectral_iterations: usize) -> Result<Self> {
        let find = |name: &str| -> Result<&Tensor> {
            records
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))
        };
        let base = find("g.enc1.wf")?.shape()[0];
        let disc = find("d.0.w")?.shape()[0];
        let take = |layout: Vec<(String, Vec<usize>)>| -> Result<Vec<Tensor>> {
            layout
                .into_iter()
                .map(|(n, s)| {
                    let t = find(&n)?;
                    if t.shape() != s.as_slice() {
                        return Err(Error::Checkpoint(format!("{n}: shape {:?}, expected {s:?}", t.shape())));
                    }
                    Ok(t.clone())
                })
                .collect()
        };
        let generator = take(generator_layout(base))?;
        let discriminator = take(discriminator_layout(disc))?;
        let mut spectral = Vec::new();
        for i in 0..4 {
            let u = find(&format!("d.{i}.u"))?;
            if u.shape() != [discriminator[2 * i].shape()[0]] {
                return Err(Error::Checkpoint(format!("d.{i}.u has shape {:?}", u.shape())));
            }
            spectral.push(SpectralState {
                u: u.data().to_vec(),
                iterations_per_step: spectral_iterations,
            });
        }
        Ok(GanParams {
            base_channels: base,
            disc_channels: disc,
            generator,
            discriminator,
            spectral,
        })
    }
}

/// Generator tensors bound on a tape, in layout order.
#[derive(Clone, Debug)]
pub struct GenVars {
    pub vars: Vec<Var>,
    base_channels: usize,
}

impl GenVars {
    pub fn bind(tape: &mut Tape, params: &GanParams, trainable: bool) -> Self {
        let vars = params
            .generator
            .iter()
            .map(|t| if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) })
            .collect();
        GenVars {
            vars,
            base_channels: params.base_channels,
        }
    }

    /// Wraps vars already on the tape; they must follow the layout for
    /// `base_channels`.
    pub fn from_vars(tape: &Tape, vars: Vec<Var>, base_channels: usize) -> Result<Self> {
        let layout = generator_layout(base_channels);
        if layout.len() != vars.len()
            || layout.iter().zip(&vars).any(|((_, s), v)| tape.value(*v).shape() != s.as_slice())
        {
            return Err(Error::ShapeMismatch(format!(
                "generator vars do not match base width {base_channels}"
            )));
        }
        Ok(GenVars { vars, base_channels })
    }

    /// Tensor shapes in binding order.
    pub fn layout(base_channels: usize) -> Vec<Vec<usize>> {
        generator_layout(base_channels).into_iter().map(|(_, s)| s).collect()
    }
}

/// Discriminator weights bound on a tape together with their spectrally
/// normalised versions.
#[derive(Clone, Debug)]
pub struct DiscVars {
    /// Raw weight and bias per layer, interleaved.
    pub vars: Vec<Var>,
    normalized: Vec<Var>,
}

impl DiscVars {
    pub fn bind(tape: &mut Tape, params: &GanParams, uv: &[(Vec<f64>, Vec<f64>)], trainable: bool) -> Result<Self> {
        let vars: Vec<Var> = params
            .discriminator
            .iter()
            .map(|t| if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) })
            .collect();
        Self::from_vars(tape, vars, uv)
    }

    pub fn from_vars(tape: &mut Tape, vars: Vec<Var>, uv: &[(Vec<f64>, Vec<f64>)]) -> Result<Self> {
        if vars.len() != 8 || uv.len() != 4 {
            return Err(Error::ShapeMismatch(format!(
                "discriminator needs 8 tensors and 4 spectral pairs, got {} and {}",
                vars.len(),
                uv.len()
            )));
        }
        let normalized = (0..4)
            .map(|i| tape.spectral_norm(vars[2 * i], &uv[i].0, &uv[i].1))
            .collect::<Result<_>>()?;
        Ok(DiscVars { vars, normalized })
    }
}

/// Block-average downsampling by `factor`, keeping cells at least half covered.
pub fn downsample_mask(m: &Mask, factor: usize) -> Result<Mask> {
    if factor == 0 || m.width() % factor != 0 || m.height() % factor != 0 {
        return Err(Error::DimensionMismatch(format!(
            "{}x{} mask is not divisible by {factor}",
            m.width(),
            m.height()
        )));
    }
    let (w, h) = (m.width() / factor, m.height() / factor);
    let mut out = Mask::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let n = (0..factor)
                .flat_map(|dy| (0..factor).map(move |dx| (dx, dy)))
                .filter(|&(dx, dy)| m.get(x * factor + dx, y * factor + dy))
                .count();
            out.set(x, y, 2 * n >= factor * factor);
        }
    }
    Ok(out)
}

fn gated(tape: &mut Tape, x: Var, g: &GenVars, layer: usize, spec: ConvSpec) -> Result<Var> {
    let p = &g.vars[layer * 4..layer * 4 + 4];
    tape.gated_conv(x, (p[0], Some(p[1])), (p[2], Some(p[3])), spec)
}

/// Maps the `1×3×H×W` image `u` (values in `[0, 1]`) to a same-sized output
/// in `(0, 1)`. `H` and `W` must be multiples of 4. The masks are at image
/// resolution; the similarity encoder is skipped when either region vanishes
/// at bottleneck resolution.
pub fn generator_forward(
    tape: &mut Tape,
    g: &GenVars,
    u: Var,
    template_mask: &Mask,
    original_mask: &Mask,
) -> Result<Var> {
    let s = tape.value(u).shape().to_vec();
    if s.len() != 4 || s[0] != 1 || s[1] != 3 {
        return Err(Error::ShapeMismatch(format!("generator input {s:?}, expected 1x3xHxW")));
    }
    if s[2] % 4 != 0 || s[3] % 4 != 0 {
        return Err(Error::DimensionMismatch(format!(
            "generator input {}x{} is not a multiple of 4",
            s[3], s[2]
        )));
    }
    if template_mask.width() != s[3] || template_mask.height() != s[2] {
        return Err(Error::DimensionMismatch("template mask does not match the image".into()));
    }
    let layers = generator_layers(g.base_channels);
    let m = tape.constant(mask_tensor(template_mask));
    let mut x = tape.concat_channels(u, m)?;
    for (i, l) in layers.iter().enumerate().take(5) {
        x = gated(tape, x, g, i, l.spec)?;
    }
    let t_low = downsample_mask(template_mask, 4)?;
    let mut o_low = downsample_mask(original_mask, 4)?;
    for y in 0..o_low.height() {
        for xx in 0..o_low.width() {
            if t_low.get(xx, y) {
                o_low.set(xx, y, false);
            }
        }
    }
    let fused = if o_low.is_empty() {
        x
    } else {
        fse(tape, x, &t_low, &o_low)?.out
    };
    let mut x = tape.concat_channels(x, fused)?;
    x = gated(tape, x, g, 5, layers[5].spec)?;
    x = tape.upsample2(x)?;
    x = gated(tape, x, g, 6, layers[6].spec)?;
    x = tape.upsample2(x)?;
    x = gated(tape, x, g, 7, layers[7].spec)?;
    let n = g.vars.len();
    let y = tape.conv2d(x, g.vars[n - 2], ConvSpec::same(3))?;
    let y = tape.add_bias(y, g.vars[n - 1])?;
    tape.sigmoid(y)
}

/// Patch scores `1×1×H/16×W/16` for a `1×3×H×W` image.
pub fn discriminator_forward(tape: &mut Tape, d: &DiscVars, x: Var) -> Result<Var> {
    let mut h = x;
    for i in 0..4 {
        h = tape.conv2d(h, d.normalized[i], ConvSpec::new(2, 1, 1))?;
        h = tape.add_bias(h, d.vars[2 * i + 1])?;
        if i < 3 {
            h = tape.leaky_relu(h, 0.2)?;
        }
    }
    Ok(h)
}
