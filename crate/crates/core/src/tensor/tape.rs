use super::linalg::{col2im, gemm, im2col, out_extent, ConvGeom};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub dilation: usize,
    pub pad: usize,
}

impl ConvSpec {
    pub const fn same(k: usize) -> Self {
        ConvSpec {
            stride: 1,
            dilation: 1,
            pad: k / 2,
        }
    }

    pub const fn new(stride: usize, dilation: usize, pad: usize) -> Self {
        ConvSpec {
            stride,
            dilation,
            pad,
        }
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Conv {
        x: Var,
        w: Var,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    AddBias(Var, Var),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    Abs(Var),
    Relu(Var),
    Mean(Var),
    Sum(Var),
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    ConcatChannels(Var, Var),
    Upsample2(Var),
    MatMul {
        a: Var,
        b: Var,
        b_transposed: bool,
    },
    Unfold {
        x: Var,
        geom: ConvGeom,
    },
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    ScatterRows {
        base: Var,
        idx: Vec<usize>,
        src: Var,
    },
    NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    ChannelsToRows(Var),
    RowsToChannels(Var),
    SpectralNorm {
        w: Var,
        u: Vec<f64>,
        v: Vec<f64>,
        sigma: f64,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of a computation. Node order is a topological order, so
/// the backward pass is a single reverse sweep.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn same_shape(op: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(format!(
            "{op}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn rank(op: &str, t: &Tensor, r: usize) -> Result<()> {
    if t.shape().len() != r {
        return Err(Error::ShapeMismatch(format!(
            "{op}: expected rank {r}, got shape {:?}",
            t.shape()
        )));
    }
    Ok(())
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor {
        shape: t.shape.clone(),
        data: t.data.iter().map(|&v| f(v)).collect(),
    }
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor {
        shape: a.shape.clone(),
        data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Smallest `|x|` over the inputs of `relu`, `leaky_relu` and `abs` nodes
    /// on a gradient path; infinite when there are none. Finite differences
    /// taken closer than this to a kink are not meaningful.
    pub fn kink_distance(&self) -> f64 {
        self.nodes
            .iter()
            .filter(|n| n.requires_grad)
            .filter_map(|n| match n.op {
                Op::Relu(x) | Op::LeakyRelu(x, _) | Op::Abs(x) => Some(x),
                _ => None,
            })
            .flat_map(|x| self.nodes[x.0].value.data.iter().map(|v| v.abs()))
            .fold(f64::INFINITY, f64::min)
    }

    /// A leaf whose gradient is wanted.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push_leaf(t, true)
    }

    /// A leaf treated as a constant.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_leaf(t, false)
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &str, value: Tensor, op: Op, parents: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("{name} output")));
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.value(a), self.value(b))?;
        let out = zip(self.value(a), self.value(b), |x, y| x + y);
        self.push("add", out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("sub", self.value(a), self.value(b))?;
        let out = zip(self.value(a), self.value(b), |x, y| x - y);
        self.push("sub", out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.value(a), self.value(b))?;
        let out = zip(self.value(a), self.value(b), |x, y| x * y);
        self.push("mul", out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = map(self.value(a), |x| x * c);
        self.push("scale", out, Op::Scale(a, c), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = map(self.value(a), |x| x + c);
        self.push("add_scalar", out, Op::AddScalar(a), &[a])
    }

    /// Cross-correlation of `x` (`N×C×H×W`) with `w` (`O×C×kh×kw`), zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, spec: ConvSpec) -> Result<Var> {
        rank("conv2d input", self.value(x), 4)?;
        rank("conv2d weight", self.value(w), 4)?;
        let (xs, ws) = (self.value(x).shape(), self.value(w).shape());
        let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, wc, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        if wc != c {
            return Err(Error::ShapeMismatch(format!(
                "conv2d: input has {c} channels, weight expects {wc}"
            )));
        }
        if spec.stride == 0 || spec.dilation == 0 || kh == 0 || kw == 0 {
            return Err(Error::ShapeMismatch("conv2d: zero stride, dilation or kernel".into()));
        }
        let (oh, ow) = match (
            out_extent(h, kh, spec.stride, spec.dilation, spec.pad),
            out_extent(wd, kw, spec.stride, spec.dilation, spec.pad),
        ) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                return Err(Error::ShapeMismatch(format!(
                    "conv2d: {h}x{wd} input too small for {kh}x{kw} kernel ({spec:?})"
                )))
            }
        };
        let geom = ConvGeom {
            c,
            h,
            w: wd,
            kh,
            kw,
            stride: spec.stride,
            dilation: spec.dilation,
            pad: spec.pad,
            oh,
            ow,
        };
        let (rows, ncols) = (geom.rows(), geom.cols());
        let mut cols = vec![0.0; n * rows * ncols];
        let mut out = vec![0.0; n * o * ncols];
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        for s in 0..n {
            let col = &mut cols[s * rows * ncols..(s + 1) * rows * ncols];
            im2col(&xv[s * c * h * wd..(s + 1) * c * h * wd], &geom, col);
            gemm(o, rows, ncols, wv, false, col, false, 0.0, &mut out[s * o * ncols..(s + 1) * o * ncols]);
        }
        let value = Tensor {
            shape: vec![n, o, oh, ow],
            data: out,
        };
        self.push("conv2d", value, Op::Conv { x, w, geom, cols }, &[x, w])
    }

    /// Adds `b[c]` to every cell of channel `c` of an `N×C×H×W` tensor.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        rank("add_bias input", self.value(x), 4)?;
        let xs = self.value(x).shape().to_vec();
        if self.value(b).shape() != [xs[1]] {
            return Err(Error::ShapeMismatch(format!(
                "add_bias: bias {:?} for {} channels",
                self.value(b).shape(),
                xs[1]
            )));
        }
        let plane = xs[2] * xs[3];
        let bv = self.value(b).data().to_vec();
        let mut out = self.value(x).clone();
        for (i, v) in out.data.iter_mut().enumerate() {
            *v += bv[(i / plane) % xs[1]];
        }
        self.push("add_bias", out, Op::AddBias(x, b), &[x, b])
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        let out = map(self.value(x), |v| if v >= 0.0 { v } else { slope * v });
        self.push("leaky_relu", out, Op::LeakyRelu(x, slope), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = map(self.value(x), |v| {
            if v >= 0.0 {
                1.0 / (1.0 + (-v).exp())
            } else {
                let e = v.exp();
                e / (1.0 + e)
            }
        });
        self.push("sigmoid", out, Op::Sigmoid(x), &[x])
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        let out = map(self.value(x), f64::abs);
        self.push("abs", out, Op::Abs(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = map(self.value(x), |v| v.max(0.0));
        self.push("relu", out, Op::Relu(x), &[x])
    }

    /// Mean of all entries, shape `[1]`.
    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let out = Tensor::scalar(t.sum() / t.numel() as f64);
        self.push("mean", out, Op::Mean(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).sum());
        self.push("sum", out, Op::Sum(x), &[x])
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::ShapeMismatch(format!("softmax: axis {axis} of {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let xv = self.value(x).data();
        let mut out = vec![0.0; xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * len + k) * inner + i;
                let m = (0..len).map(|k| xv[at(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for k in 0..len {
                    let e = (xv[at(k)] - m).exp();
                    out[at(k)] = e;
                    s += e;
                }
                for k in 0..len {
                    out[at(k)] /= s;
                }
            }
        }
        let value = Tensor { shape, data: out };
        self.push("softmax", value, Op::Softmax { x, outer, len, inner }, &[x])
    }

    /// Concatenates two `N×C×H×W` tensors along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        rank("concat", self.value(a), 4)?;
        rank("concat", self.value(b), 4)?;
        let (sa, sb) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        if sa[0] != sb[0] || sa[2..] != sb[2..] {
            return Err(Error::ShapeMismatch(format!("concat: {sa:?} vs {sb:?}")));
        }
        let plane = sa[2] * sa[3];
        let (ca, cb) = (sa[1] * plane, sb[1] * plane);
        let mut data = Vec::with_capacity(sa[0] * (ca + cb));
        for n in 0..sa[0] {
            data.extend_from_slice(&self.value(a).data()[n * ca..(n + 1) * ca]);
            data.extend_from_slice(&self.value(b).data()[n * cb..(n + 1) * cb]);
        }
        let value = Tensor {
            shape: vec![sa[0], sa[1] + sb[1], sa[2], sa[3]],
            data,
        };
        self.push("concat", value, Op::ConcatChannels(a, b), &[a, b])
    }

    /// Nearest-neighbour 2x upsampling of `N×C×H×W`.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        rank("upsample2", self.value(x), 4)?;
        let s = self.value(x).shape().to_vec();
        let (h, w) = (s[2], s[3]);
        let xv = self.value(x).data();
        let mut data = vec![0.0; s[0] * s[1] * 4 * h * w];
        for p in 0..s[0] * s[1] {
            for y in 0..2 * h {
                for xo in 0..2 * w {
                    data[(p * 2 * h + y) * 2 * w + xo] = xv[(p * h + y / 2) * w + xo / 2];
                }
            }
        }
        let value = Tensor {
            shape: vec![s[0], s[1], 2 * h, 2 * w],
            data,
        };
        self.push("upsample2", value, Op::Upsample2(x), &[x])
    }

    /// `a · b` for `a: m×k`, `b: k×n`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` for `a: m×k`, `b: n×k`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, bt: bool) -> Result<Var> {
        rank("matmul", self.value(a), 2)?;
        rank("matmul", self.value(b), 2)?;
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        let (m, k) = (sa[0], sa[1]);
        let (kb, n) = if bt { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != kb {
            return Err(Error::ShapeMismatch(format!("matmul: {sa:?} x {sb:?} (bt={bt})")));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), bt, 0.0, &mut out);
        let value = Tensor {
            shape: vec![m, n],
            data: out,
        };
        self.push(
            "matmul",
            value,
            Op::MatMul {
                a,
                b,
                b_transposed: bt,
            },
            &[a, b],
        )
    }

    /// Every `k×k` zero-padded patch of a `1×C×H×W` map as a row:
    /// output `H·W × C·k·k`, rows in raster order. `k` must be odd.
    pub fn unfold(&mut self, x: Var, k: usize) -> Result<Var> {
        rank("unfold", self.value(x), 4)?;
        let s = self.value(x).shape().to_vec();
        if s[0] != 1 || k % 2 == 0 {
            return Err(Error::ShapeMismatch(format!("unfold: batch {} kernel {k}", s[0])));
        }
        let geom = ConvGeom {
            c: s[1],
            h: s[2],
            w: s[3],
            kh: k,
            kw: k,
            stride: 1,
            dilation: 1,
            pad: k / 2,
            oh: s[2],
            ow: s[3],
        };
        let (rows, ncols) = (geom.rows(), geom.cols());
        let mut cols = vec![0.0; rows * ncols];
        im2col(self.value(x).data(), &geom, &mut cols);
        let mut data = vec![0.0; rows * ncols];
        for r in 0..rows {
            for p in 0..ncols {
                data[p * rows + r] = cols[r * ncols + p];
            }
        }
        let value = Tensor {
            shape: vec![ncols, rows],
            data,
        };
        self.push("unfold", value, Op::Unfold { x, geom }, &[x])
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        rank("gather_rows", self.value(x), 2)?;
        let s = self.value(x).shape().to_vec();
        if idx.iter().any(|&i| i >= s[0]) {
            return Err(Error::ShapeMismatch(format!("gather_rows: index past {} rows", s[0])));
        }
        let xv = self.value(x).data();
        let mut data = Vec::with_capacity(idx.len() * s[1]);
        for &i in idx {
            data.extend_from_slice(&xv[i * s[1]..(i + 1) * s[1]]);
        }
        let value = Tensor {
            shape: vec![idx.len(), s[1]],
            data,
        };
        self.push(
            "gather_rows",
            value,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            &[x],
        )
    }

    /// Copy of `base` with row `idx[i]` replaced by row `i` of `src`.
    /// Indices must be distinct.
    pub fn scatter_rows(&mut self, base: Var, idx: &[usize], src: Var) -> Result<Var> {
        rank("scatter_rows", self.value(base), 2)?;
        rank("scatter_rows", self.value(src), 2)?;
        let sb = self.value(base).shape().to_vec();
        let ss = self.value(src).shape().to_vec();
        if ss != [idx.len(), sb[1]] || idx.iter().any(|&i| i >= sb[0]) {
            return Err(Error::ShapeMismatch(format!(
                "scatter_rows: base {sb:?}, src {ss:?}, {} indices",
                idx.len()
            )));
        }
        let mut out = self.value(base).clone();
        let sv = self.value(src).data();
        let c = sb[1];
        for (r, &i) in idx.iter().enumerate() {
            out.data[i * c..(i + 1) * c].copy_from_slice(&sv[r * c..(r + 1) * c]);
        }
        self.push(
            "scatter_rows",
            out,
            Op::ScatterRows {
                base,
                idx: idx.to_vec(),
                src,
            },
            &[base, src],
        )
    }

    /// Scales each row of a matrix to unit L2 norm. All-zero rows stay zero.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        rank("normalize_rows", self.value(x), 2)?;
        let s = self.value(x).shape().to_vec();
        let mut out = self.value(x).clone();
        let mut norms = Vec::with_capacity(s[0]);
        for row in out.data.chunks_mut(s[1].max(1)).take(s[0]) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            norms.push(n);
            if n > 1e-12 {
                row.iter_mut().for_each(|v| *v /= n);
            } else {
                row.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        self.push("normalize_rows", out, Op::NormalizeRows { x, norms }, &[x])
    }

    /// `1×C×H×W` to `H·W×C`.
    pub fn channels_to_rows(&mut self, x: Var) -> Result<Var> {
        rank("channels_to_rows", self.value(x), 4)?;
        let s = self.value(x).shape().to_vec();
        if s[0] != 1 {
            return Err(Error::ShapeMismatch("channels_to_rows: batch must be 1".into()));
        }
        let (c, p) = (s[1], s[2] * s[3]);
        let xv = self.value(x).data();
        let mut data = vec![0.0; c * p];
        for ch in 0..c {
            for i in 0..p {
                data[i * c + ch] = xv[ch * p + i];
            }
        }
        let value = Tensor {
            shape: vec![p, c],
            data,
        };
        self.push("channels_to_rows", value, Op::ChannelsToRows(x), &[x])
    }

    /// `H·W×C` to `1×C×H×W`.
    pub fn rows_to_channels(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        rank("rows_to_channels", self.value(x), 2)?;
        let s = self.value(x).shape().to_vec();
        if s[0] != h * w {
            return Err(Error::ShapeMismatch(format!("rows_to_channels: {s:?} for {h}x{w}")));
        }
        let (p, c) = (s[0], s[1]);
        let xv = self.value(x).data();
        let mut data = vec![0.0; c * p];
        for i in 0..p {
            for ch in 0..c {
                data[ch * p + i] = xv[i * c + ch];
            }
        }
        let value = Tensor {
            shape: vec![1, c, h, w],
            data,
        };
        self.push("rows_to_channels", value, Op::RowsToChannels(x), &[x])
    }

    /// `w / sigma` where `sigma = uᵀ W v` with `W` the `out × rest` view of
    /// `w`. `u` and `v` are held constant for differentiation.
    pub fn spectral_norm(&mut self, w: Var, u: &[f64], v: &[f64]) -> Result<Var> {
        let wt = self.value(w);
        let rows = wt.shape().first().copied().unwrap_or(0);
        let cols = if rows == 0 { 0 } else { wt.numel() / rows };
        if u.len() != rows || v.len() != cols {
            return Err(Error::ShapeMismatch(format!(
                "spectral_norm: u {} v {} for {rows}x{cols}",
                u.len(),
                v.len()
            )));
        }
        let wd = wt.data();
        let mut sigma = 0.0;
        for r in 0..rows {
            let row = &wd[r * cols..(r + 1) * cols];
            sigma += u[r] * row.iter().zip(v).map(|(a, b)| a * b).sum::<f64>();
        }
        if sigma.abs() < 1e-300 {
            return Err(Error::ZeroMatrix);
        }
        let out = map(wt, |x| x / sigma);
        self.push(
            "spectral_norm",
            out,
            Op::SpectralNorm {
                w,
                u: u.to_vec(),
                v: v.to_vec(),
                sigma,
            },
            &[w],
        )
    }

    /// `leaky_relu(conv(x, w_feat) + b_feat, 0.2) ⊙ sigmoid(conv(x, w_gate) + b_gate)`.
    pub fn gated_conv(
        &mut self,
        x: Var,
        feat: (Var, Option<Var>),
        gate: (Var, Option<Var>),
        spec: ConvSpec,
    ) -> Result<Var> {
        if self.value(feat.0).shape() != self.value(gate.0).shape() {
            return Err(Error::ShapeMismatch(format!(
                "gated_conv: feature kernel {:?} vs gate kernel {:?}",
                self.value(feat.0).shape(),
                self.value(gate.0).shape()
            )));
        }
        let mut f = self.conv2d(x, feat.0, spec)?;
        if let Some(b) = feat.1 {
            f = self.add_bias(f, b)?;
        }
        let f = self.leaky_relu(f, 0.2)?;
        let mut g = self.conv2d(x, gate.0, spec)?;
        if let Some(b) = gate.1 {
            g = self.add_bias(g, b)?;
        }
        let g = self.sigmoid(g)?;
        self.mul(f, g)
    }

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        if self.value(loss).numel() != 1 {
            return Err(Error::ShapeMismatch(format!(
                "backward needs a scalar, got {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
        }
        // interior gradients were consumed above; only leaves remain
        Ok(Grads { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.data.iter_mut().zip(&g.data).for_each(|(a, b)| *a += b),
            slot => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if self.wants(*b) {
                    self.accumulate(grads, *b, map(g, |v| -v));
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    self.accumulate(grads, *a, zip(g, self.value(*b), |x, y| x * y));
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, zip(g, self.value(*a), |x, y| x * y));
                }
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, map(g, |v| v * c)),
            Op::AddScalar(a) => self.accumulate(grads, *a, g.clone()),
            Op::Conv { x, w, geom, cols } => {
                let xs = self.value(*x).shape();
                let o = self.value(*w).shape()[0];
                let n = xs[0];
                let (rows, ncols) = (geom.rows(), geom.cols());
                let per_x = geom.c * geom.h * geom.w;
                if self.wants(*w) {
                    let mut dw = Tensor::zeros(self.value(*w).shape());
                    for s in 0..n {
                        gemm(
                            o,
                            ncols,
                            rows,
                            &g.data[s * o * ncols..(s + 1) * o * ncols],
                            false,
                            &cols[s * rows * ncols..(s + 1) * rows * ncols],
                            true,
                            1.0,
                            &mut dw.data,
                        );
                    }
                    self.accumulate(grads, *w, dw);
                }
                if self.wants(*x) {
                    let mut dx = Tensor::zeros(xs);
                    let mut dcols = vec![0.0; rows * ncols];
                    let wv = self.value(*w).data();
                    for s in 0..n {
                        gemm(
                            rows,
                            o,
                            ncols,
                            wv,
                            true,
                            &g.data[s * o * ncols..(s + 1) * o * ncols],
                            false,
                            0.0,
                            &mut dcols,
                        );
                        col2im(&dcols, geom, &mut dx.data[s * per_x..(s + 1) * per_x]);
                    }
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::AddBias(x, b) => {
                self.accumulate(grads, *x, g.clone());
                if self.wants(*b) {
                    let s = g.shape();
                    let plane = s[2] * s[3];
                    let mut db = Tensor::zeros(&[s[1]]);
                    for (k, chunk) in g.data.chunks(plane).enumerate() {
                        db.data[k % s[1]] += chunk.iter().sum::<f64>();
                    }
                    self.accumulate(grads, *b, db);
                }
            }
            Op::LeakyRelu(x, slope) => {
                let d = zip(g, self.value(*x), |gv, xv| if xv >= 0.0 { gv } else { gv * slope });
                self.accumulate(grads, *x, d);
            }
            Op::Sigmoid(x) => {
                let d = zip(g, y, |gv, yv| gv * yv * (1.0 - yv));
                self.accumulate(grads, *x, d);
            }
            Op::Abs(x) => {
                let d = zip(g, self.value(*x), |gv, xv| {
                    if xv > 0.0 {
                        gv
                    } else if xv < 0.0 {
                        -gv
                    } else {
                        0.0
                    }
                });
                self.accumulate(grads, *x, d);
            }
            Op::Relu(x) => {
                let d = zip(g, self.value(*x), |gv, xv| if xv > 0.0 { gv } else { 0.0 });
                self.accumulate(grads, *x, d);
            }
            Op::Mean(x) => {
                let t = self.value(*x);
                self.accumulate(grads, *x, Tensor::full(t.shape(), g.data[0] / t.numel() as f64));
            }
            Op::Sum(x) => {
                let t = self.value(*x);
                self.accumulate(grads, *x, Tensor::full(t.shape(), g.data[0]));
            }
            Op::Softmax { x, outer, len, inner } => {
                let mut d = Tensor::zeros(y.shape());
                for o in 0..*outer {
                    for i in 0..*inner {
                        let at = |k: usize| (o * len + k) * inner + i;
                        let dot: f64 = (0..*len).map(|k| g.data[at(k)] * y.data[at(k)]).sum();
                        for k in 0..*len {
                            d.data[at(k)] = y.data[at(k)] * (g.data[at(k)] - dot);
                        }
                    }
                }
                self.accumulate(grads, *x, d);
            }
            Op::ConcatChannels(a, b) => {
                let (sa, sb) = (self.value(*a).shape(), self.value(*b).shape());
                let plane = sa[2] * sa[3];
                let (ca, cb) = (sa[1] * plane, sb[1] * plane);
                let mut da = Vec::with_capacity(sa[0] * ca);
                let mut db = Vec::with_capacity(sa[0] * cb);
                for n in 0..sa[0] {
                    let base = n * (ca + cb);
                    da.extend_from_slice(&g.data[base..base + ca]);
                    db.extend_from_slice(&g.data[base + ca..base + ca + cb]);
                }
                self.accumulate(grads, *a, Tensor { shape: sa.to_vec(), data: da });
                self.accumulate(grads, *b, Tensor { shape: sb.to_vec(), data: db });
            }
            Op::Upsample2(x) => {
                let s = self.value(*x).shape();
                let (h, w) = (s[2], s[3]);
                let mut d = Tensor::zeros(s);
                for p in 0..s[0] * s[1] {
                    for yy in 0..2 * h {
                        for xx in 0..2 * w {
                            d.data[(p * h + yy / 2) * w + xx / 2] += g.data[(p * 2 * h + yy) * 2 * w + xx];
                        }
                    }
                }
                self.accumulate(grads, *x, d);
            }
            Op::MatMul { a, b, b_transposed } => {
                let (sa, sb) = (self.value(*a).shape(), self.value(*b).shape());
                let (m, k) = (sa[0], sa[1]);
                let n = y.shape()[1];
                if self.wants(*a) {
                    let mut da = Tensor::zeros(sa);
                    // da = g · op(b)ᵀ
                    gemm(m, n, k, &g.data, false, self.value(*b).data(), !b_transposed, 0.0, &mut da.data);
                    self.accumulate(grads, *a, da);
                }
                if self.wants(*b) {
                    let mut db = Tensor::zeros(sb);
                    if *b_transposed {
                        // db (n×k) = gᵀ · a
                        gemm(n, m, k, &g.data, true, self.value(*a).data(), false, 0.0, &mut db.data);
                    } else {
                        // db (k×n) = aᵀ · g
                        gemm(k, m, n, self.value(*a).data(), true, &g.data, false, 0.0, &mut db.data);
                    }
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Unfold { x, geom } => {
                let (rows, ncols) = (geom.rows(), geom.cols());
                let mut cols = vec![0.0; rows * ncols];
                for p in 0..ncols {
                    for r in 0..rows {
                        cols[r * ncols + p] = g.data[p * rows + r];
                    }
                }
                let mut d = Tensor::zeros(self.value(*x).shape());
                col2im(&cols, geom, &mut d.data);
                self.accumulate(grads, *x, d);
            }
            Op::GatherRows { x, idx } => {
                let s = self.value(*x).shape();
                let c = s[1];
                let mut d = Tensor::zeros(s);
                for (r, &i) in idx.iter().enumerate() {
                    for k in 0..c {
                        d.data[i * c + k] += g.data[r * c + k];
                    }
                }
                self.accumulate(grads, *x, d);
            }
            Op::ScatterRows { base, idx, src } => {
                let c = y.shape()[1];
                if self.wants(*base) {
                    let mut d = g.clone();
                    for &i in idx {
                        d.data[i * c..(i + 1) * c].iter_mut().for_each(|v| *v = 0.0);
                    }
                    self.accumulate(grads, *base, d);
                }
                if self.wants(*src) {
                    let mut d = Tensor::zeros(self.value(*src).shape());
                    for (r, &i) in idx.iter().enumerate() {
                        d.data[r * c..(r + 1) * c].copy_from_slice(&g.data[i * c..(i + 1) * c]);
                    }
                    self.accumulate(grads, *src, d);
                }
            }
            Op::NormalizeRows { x, norms } => {
                let c = y.shape()[1];
                let mut d = Tensor::zeros(y.shape());
                for (r, &n) in norms.iter().enumerate() {
                    if n <= 1e-12 {
                        continue;
                    }
                    let yr = &y.data[r * c..(r + 1) * c];
                    let gr = &g.data[r * c..(r + 1) * c];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for k in 0..c {
                        d.data[r * c + k] = (gr[k] - yr[k] * dot) / n;
                    }
                }
                self.accumulate(grads, *x, d);
            }
            Op::ChannelsToRows(x) => {
                let s = self.value(*x).shape();
                let (c, p) = (s[1], s[2] * s[3]);
                let mut d = Tensor::zeros(s);
                for ch in 0..c {
                    for i in 0..p {
                        d.data[ch * p + i] = g.data[i * c + ch];
                    }
                }
                self.accumulate(grads, *x, d);
            }
            Op::RowsToChannels(x) => {
                let s = self.value(*x).shape();
                let (p, c) = (s[0], s[1]);
                let mut d = Tensor::zeros(s);
                for i in 0..p {
                    for ch in 0..c {
                        d.data[i * c + ch] = g.data[ch * p + i];
                    }
                }
                self.accumulate(grads, *x, d);
            }
            Op::SpectralNorm { w, u, v, sigma } => {
                // d(W/σ) with σ = uᵀWv: G/σ − (Σ G⊙W)/σ² · u vᵀ
                let wt = self.value(*w);
                let cols = v.len();
                let gw: f64 = g.data.iter().zip(&wt.data).map(|(a, b)| a * b).sum();
                let k = gw / (sigma * sigma);
                let mut d = map(g, |x| x / sigma);
                for (r, &ur) in u.iter().enumerate() {
                    for (cidx, &vc) in v.iter().enumerate() {
                        d.data[r * cols + cidx] -= k * ur * vc;
                    }
                }
                self.accumulate(grads, *w, d);
            }
        }
    }
}
