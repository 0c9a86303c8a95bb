use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

fn eval<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let v = tape.value(out);
    if v.numel() != 1 {
        return Err(Error::ShapeMismatch(format!("objective returned {:?}", v.shape())));
    }
    let y = v.data()[0];
    if !y.is_finite() {
        return Err(Error::NonFinite("objective".into()));
    }
    Ok(y)
}

/// Central-difference gradient of a scalar objective with respect to every
/// entry of every input.
pub fn central_difference<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<Vec<Tensor>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut g = Tensor::zeros(inputs[i].shape());
        for j in 0..inputs[i].numel() {
            let x0 = inputs[i].data()[j];
            work[i].data_mut()[j] = x0 + eps;
            let fp = eval(&f, &work)?;
            work[i].data_mut()[j] = x0 - eps;
            let fm = eval(&f, &work)?;
            work[i].data_mut()[j] = x0;
            g.data_mut()[j] = (fp - fm) / (2.0 * eps);
        }
        out.push(g);
    }
    Ok(out)
}

fn analytic_and_numeric<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<Vec<(Tensor, Tensor)>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    let numeric = central_difference(&f, inputs, eps)?;
    vars.iter()
        .zip(numeric)
        .map(|(v, num)| {
            let ana = grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(num.shape()));
            if !ana.is_finite() {
                return Err(Error::NonFinite("analytic gradient".into()));
            }
            Ok((ana, num))
        })
        .collect()
}

fn sq(a: &Tensor, b: Option<&Tensor>) -> f64 {
    match b {
        Some(b) => a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum(),
        None => a.data().iter().map(|x| x * x).sum(),
    }
}

fn ratio(diff: f64, na: f64, nn: f64) -> f64 {
    let denom = na.sqrt().max(nn.sqrt());
    if denom > 0.0 {
        diff.sqrt() / denom
    } else {
        0.0
    }
}

/// Compares tape gradients against central differences. Returns the worst,
/// over inputs, of `‖analytic − numeric‖₂ / max(‖analytic‖₂, ‖numeric‖₂)`
/// (zero when both gradients vanish).
pub fn grad_check<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let pairs = analytic_and_numeric(f, inputs, eps)?;
    Ok(pairs
        .iter()
        .map(|(a, n)| ratio(sq(a, Some(n)), sq(a, None), sq(n, None)))
        .fold(0.0, f64::max))
}

/// Like [`grad_check`], but with all inputs flattened into one vector, so
/// that inputs whose gradient is tiny next to the others do not dominate.
pub fn grad_check_joint<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let pairs = analytic_and_numeric(f, inputs, eps)?;
    let (mut d, mut na, mut nn) = (0.0, 0.0, 0.0);
    for (a, n) in &pairs {
        d += sq(a, Some(n));
        na += sq(a, None);
        nn += sq(n, None);
    }
    Ok(ratio(d, na, nn))
}
