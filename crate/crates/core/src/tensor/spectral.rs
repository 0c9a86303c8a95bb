use rand::Rng;

use super::Tensor;
use crate::error::{Error, Result};

/// Persistent left singular-vector estimate for one weight, viewed as an
/// `out × rest` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralState {
    pub u: Vec<f64>,
    pub iterations_per_step: usize,
}

impl SpectralState {
    /// Random unit `u` of length `rows`.
    pub fn random<R: Rng + ?Sized>(rows: usize, rng: &mut R) -> Self {
        let mut u: Vec<f64> = (0..rows).map(|_| rng.random_range(-1.0..1.0)).collect();
        if normalize(&mut u) == 0.0 {
            u = vec![0.0; rows];
            if rows > 0 {
                u[0] = 1.0;
            }
        }
        SpectralState {
            u,
            iterations_per_step: 1,
        }
    }
}

fn normalize(x: &mut [f64]) -> f64 {
    let n = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n > 0.0 {
        x.iter_mut().for_each(|v| *v /= n);
    }
    n
}

fn matrix_dims(w: &Tensor) -> (usize, usize) {
    let rows = w.shape().first().copied().unwrap_or(0);
    let cols = if rows == 0 { 0 } else { w.numel() / rows };
    (rows, cols)
}

/// Runs `iterations` power-iteration steps from `u` (updated in place) and
/// returns `(v, sigma)` with `sigma = uᵀ W v`.
pub fn power_iteration(w: &Tensor, u: &mut [f64], iterations: usize) -> Result<(Vec<f64>, f64)> {
    let (rows, cols) = matrix_dims(w);
    if u.len() != rows {
        return Err(Error::ShapeMismatch(format!("u has {} entries for {rows} rows", u.len())));
    }
    if w.data().iter().all(|&x| x == 0.0) {
        return Err(Error::ZeroMatrix);
    }
    let wd = w.data();
    let mut v = vec![0.0; cols];
    for _ in 0..iterations.max(1) {
        v.iter_mut().for_each(|x| *x = 0.0);
        for (r, &ur) in u.iter().enumerate() {
            for (vc, &wv) in v.iter_mut().zip(&wd[r * cols..(r + 1) * cols]) {
                *vc += ur * wv;
            }
        }
        if normalize(&mut v) == 0.0 {
            // u orthogonal to the row space; restart from a fixed direction
            v.iter_mut().for_each(|x| *x = 1.0);
            normalize(&mut v);
        }
        for (r, ur) in u.iter_mut().enumerate() {
            *ur = wd[r * cols..(r + 1) * cols].iter().zip(&v).map(|(a, b)| a * b).sum();
        }
        normalize(u);
    }
    let sigma: f64 = u
        .iter()
        .enumerate()
        .map(|(r, &ur)| ur * wd[r * cols..(r + 1) * cols].iter().zip(&v).map(|(a, b)| a * b).sum::<f64>())
        .sum();
    Ok((v, sigma))
}

/// Divides `w` by its power-iteration top singular value estimate, advancing
/// `state.u` by `state.iterations_per_step` steps.
pub fn spectral_normalize(w: &Tensor, state: &mut SpectralState) -> Result<Tensor> {
    let (_, sigma) = power_iteration(w, &mut state.u, state.iterations_per_step)?;
    if sigma.abs() < 1e-300 {
        return Err(Error::ZeroMatrix);
    }
    let data = w.data().iter().map(|x| x / sigma).collect();
    Tensor::new(w.shape(), data)
}
