//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation as a node appended after its inputs, so
//! walking node indices backwards is a valid reverse topological order. One tape
//! serves one forward pass; parameters enter as leaves and their gradients are
//! read back (or accumulated into the owning [`Tensor`]) after [`Tape::backward`].

use std::fmt;
use std::ops::Range;

use crate::error::{dim_err, Error, Result};
use crate::image::bilinear_taps;
use crate::tensor::{check_finite, gemm, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation kinds, used for fault injection and for filtering the gradient suite.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    Add,
    Sub,
    Mul,
    AddRow,
    AddCol,
    Scale,
    Gelu,
    Relu,
    Softmax,
    LayerNorm,
    Concat,
    Slice,
    Transpose,
    Reshape,
    Sum,
    Mean,
    MeanRows,
    Resize,
    Im2Col,
}

impl OpKind {
    pub const ALL: [OpKind; 20] = [
        OpKind::MatMul,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::AddRow,
        OpKind::AddCol,
        OpKind::Scale,
        OpKind::Gelu,
        OpKind::Relu,
        OpKind::Softmax,
        OpKind::LayerNorm,
        OpKind::Concat,
        OpKind::Slice,
        OpKind::Transpose,
        OpKind::Reshape,
        OpKind::Sum,
        OpKind::Mean,
        OpKind::MeanRows,
        OpKind::Resize,
        OpKind::Im2Col,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::AddRow => "add_row",
            OpKind::AddCol => "add_col",
            OpKind::Scale => "scale",
            OpKind::Gelu => "gelu",
            OpKind::Relu => "relu",
            OpKind::Softmax => "softmax",
            OpKind::LayerNorm => "layer_norm",
            OpKind::Concat => "concat",
            OpKind::Slice => "slice",
            OpKind::Transpose => "transpose",
            OpKind::Reshape => "reshape",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::MeanRows => "mean_rows",
            OpKind::Resize => "resize",
            OpKind::Im2Col => "im2col",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        OpKind::ALL.iter().copied().find(|k| k.name() == name)
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    AddCol(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Relu(Var),
    Softmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { x: Var, ranges: Vec<Range<usize>> },
    Transpose(Var),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    Resize { x: Var, out_h: usize, out_w: usize },
    Im2Col { x: Var, k: usize, pad: usize },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::AddRow(..) => OpKind::AddRow,
            Op::AddCol(..) => OpKind::AddCol,
            Op::Scale(..) => OpKind::Scale,
            Op::Gelu(..) => OpKind::Gelu,
            Op::Relu(..) => OpKind::Relu,
            Op::Softmax(..) => OpKind::Softmax,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Concat { .. } => OpKind::Concat,
            Op::Slice { .. } => OpKind::Slice,
            Op::Transpose(..) => OpKind::Transpose,
            Op::Reshape(..) => OpKind::Reshape,
            Op::Sum(..) => OpKind::Sum,
            Op::Mean(..) => OpKind::Mean,
            Op::MeanRows(..) => OpKind::MeanRows,
            Op::Resize { .. } => OpKind::Resize,
            Op::Im2Col { .. } => OpKind::Im2Col,
        }
    }
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// GELU, tanh approximation: `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Single-owner operation recorder.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
    fault: Option<OpKind>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// Test fixture: perturbs the backward rule of `kind` so gradient checks can
    /// demonstrate that they catch a wrong derivative.
    #[doc(hidden)]
    pub fn inject_backward_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, requires_grad: bool) -> Result<Var> {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        check_finite(op.kind().name(), &data)?;
        if self.backward_done {
            return Err(Error::Tape("cannot record after backward; reset the tape".into()));
        }
        self.nodes.push(Node { shape, data, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records a leaf; it participates in backward iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Result<Var> {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad())
    }

    /// Records a leaf that always participates in backward.
    pub fn param(&mut self, t: &Tensor) -> Result<Var> {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, true)
    }

    /// Records a leaf that never participates in backward.
    pub fn constant(&mut self, t: &Tensor) -> Result<Var> {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, false)
    }

    pub fn constant_from(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(dim_err!("constant shape {:?} vs {} values", shape, data.len()));
        }
        self.push(shape, data, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.data.clone()).expect("node shape is consistent")
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.node(v).data[0]
    }

    fn dims2(&self, v: Var, op: &str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(dim_err!("{op} expects a 2-D tensor, got shape {:?}", s)),
        }
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err!("{op}: shapes {:?} and {:?} differ", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(dim_err!("matmul inner dimensions disagree: {m}x{k} · {k2}x{n}"));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a), k, 1, self.value(b), n, 1, &mut out, false);
        let rg = self.rg(&[a, b]);
        self.push(vec![m, n], out, Op::MatMul(a, b), rg)
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let name = op.kind().name();
        self.same_shape(a, b, name)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| f(*x, *y)).collect();
        let rg = self.rg(&[a, b]);
        let shape = self.shape(a).to_vec();
        self.push(shape, out, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// `x[n×d] + b[d]`, broadcasting the bias over rows.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (n, d) = self.dims2(x, "add_row")?;
        if self.node(b).data.len() != d {
            return Err(dim_err!("add_row: bias of length {} for {} columns", self.node(b).data.len(), d));
        }
        let bias = self.value(b);
        let mut out = self.value(x).to_vec();
        for row in out.chunks_exact_mut(d) {
            row.iter_mut().zip(bias).for_each(|(o, v)| *o += v);
        }
        let rg = self.rg(&[x, b]);
        self.push(vec![n, d], out, Op::AddRow(x, b), rg)
    }

    /// `x[c×…] + b[c]`, broadcasting one bias per leading-axis slice.
    pub fn add_col(&mut self, x: Var, b: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let c = *shape.first().ok_or_else(|| dim_err!("add_col on a scalar"))?;
        if self.node(b).data.len() != c {
            return Err(dim_err!("add_col: bias of length {} for {} channels", self.node(b).data.len(), c));
        }
        let inner = self.node(x).data.len() / c.max(1);
        let bias = self.value(b);
        let mut out = self.value(x).to_vec();
        if inner > 0 {
            for (chunk, v) in out.chunks_exact_mut(inner).zip(bias) {
                chunk.iter_mut().for_each(|o| *o += v);
            }
        }
        let rg = self.rg(&[x, b]);
        self.push(shape, out, Op::AddCol(x, b), rg)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let out = self.value(x).iter().map(|v| v * s).collect();
        let rg = self.rg(&[x]);
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::Scale(x, s), rg)
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).iter().map(|v| gelu(*v)).collect();
        let rg = self.rg(&[x]);
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::Gelu(x), rg)
    }

    /// ReLU; the subgradient at exactly 0 is taken as 0.
    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).iter().map(|v| v.max(0.0)).collect();
        let rg = self.rg(&[x]);
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::Relu(x), rg)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        self.softmax_rows_masked(x, None)
    }

    /// Row softmax with per-row max subtraction. Entries where `mask` is `true`
    /// behave as `-inf` logits: they receive probability 0 and no gradient.
    pub fn softmax_rows_masked(&mut self, x: Var, mask: Option<Vec<bool>>) -> Result<Var> {
        let (r, c) = self.dims2(x, "softmax_rows")?;
        if let Some(m) = &mask {
            if m.len() != r * c {
                return Err(dim_err!("softmax mask has {} entries for a {r}x{c} input", m.len()));
            }
        }
        let xs = self.value(x);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &xs[i * c..(i + 1) * c];
            let keep = |j: usize| mask.as_ref().map_or(true, |m| !m[i * c + j]);
            let max = (0..c).filter(|&j| keep(j)).map(|j| row[j]).fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(dim_err!("softmax row {i} is fully masked"));
            }
            let o = &mut out[i * c..(i + 1) * c];
            let mut z = 0.0;
            for j in 0..c {
                if keep(j) {
                    o[j] = (row[j] - max).exp();
                    z += o[j];
                }
            }
            o.iter_mut().for_each(|v| *v /= z);
        }
        let rg = self.rg(&[x]);
        self.push(vec![r, c], out, Op::Softmax(x), rg)
    }

    /// Per-row normalization to zero mean and unit (biased) variance, then `·gain + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (n, d) = self.dims2(x, "layer_norm")?;
        if d == 0 {
            return Err(dim_err!("layer_norm over zero features"));
        }
        if self.node(gain).data.len() != d || self.node(bias).data.len() != d {
            return Err(dim_err!("layer_norm affine parameters must have length {d}"));
        }
        let xs = self.value(x);
        let (g, b) = (self.value(gain), self.value(bias));
        let mut xhat = vec![0.0; n * d];
        let mut rstd = vec![0.0; n];
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            let row = &xs[i * d..(i + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[i] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[i * d + j] = h;
                out[i * d + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(&[x, gain, bias]);
        self.push(vec![n, d], out, Op::LayerNorm { x, gain, bias, xhat, rstd }, rg)
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs.first().ok_or_else(|| dim_err!("concat of zero tensors"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(dim_err!("concat axis {axis} out of range for rank {}", base.len()));
        }
        let mut extent = 0;
        for v in inputs {
            let s = self.shape(*v);
            if s.len() != base.len()
                || s.iter().zip(&base).enumerate().any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(dim_err!("concat: shape {:?} incompatible with {:?} on axis {axis}", s, base));
            }
            extent += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * extent * inner);
        for o in 0..outer {
            for v in inputs {
                let chunk = self.shape(*v)[axis] * inner;
                out.extend_from_slice(&self.value(*v)[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = extent;
        let rg = self.rg(inputs);
        self.push(shape, out, Op::Concat { inputs: inputs.to_vec(), axis }, rg)
    }

    /// Sub-block selected by one half-open range per axis.
    pub fn slice(&mut self, x: Var, ranges: &[Range<usize>]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if ranges.len() != shape.len() {
            return Err(dim_err!("slice needs {} ranges, got {}", shape.len(), ranges.len()));
        }
        for (r, &s) in ranges.iter().zip(&shape) {
            if r.start > r.end || r.end > s {
                return Err(dim_err!("slice range {:?} out of bounds for extent {s}", r));
            }
        }
        let out_shape: Vec<usize> = ranges.iter().map(|r| r.end - r.start).collect();
        let mut out = Vec::with_capacity(out_shape.iter().product());
        for_each_slice_offset(&shape, ranges, |off, len| out.extend_from_slice(&self.value(x)[off..off + len]));
        let rg = self.rg(&[x]);
        self.push(out_shape, out, Op::Slice { x, ranges: ranges.to_vec() }, rg)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims2(x, "transpose")?;
        let xs = self.value(x);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = xs[i * c + j];
            }
        }
        let rg = self.rg(&[x]);
        self.push(vec![c, r], out, Op::Transpose(x), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.node(x).data.len() {
            return Err(dim_err!("cannot reshape {:?} to {:?}", self.shape(x), shape));
        }
        let out = self.value(x).to_vec();
        let rg = self.rg(&[x]);
        self.push(shape.to_vec(), out, Op::Reshape(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).iter().sum();
        let rg = self.rg(&[x]);
        self.push(vec![1], vec![s], Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.node(x).data.len();
        if n == 0 {
            return Err(dim_err!("mean of an empty tensor"));
        }
        let s = self.value(x).iter().sum::<f64>() / n as f64;
        let rg = self.rg(&[x]);
        self.push(vec![1], vec![s], Op::Mean(x), rg)
    }

    /// Mean over the rows of `x[r×c]`, giving `[1×c]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims2(x, "mean_rows")?;
        if r == 0 {
            return Err(dim_err!("mean_rows over zero rows"));
        }
        let mut out = vec![0.0; c];
        for row in self.value(x).chunks_exact(c.max(1)) {
            out.iter_mut().zip(row).for_each(|(o, v)| *o += v);
        }
        out.iter_mut().for_each(|v| *v /= r as f64);
        let rg = self.rg(&[x]);
        self.push(vec![1, c], out, Op::MeanRows(x), rg)
    }

    /// Half-pixel-center bilinear resize of a `[C, H, W]` feature map.
    pub fn resize_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let (c, h, w) = match self.shape(x) {
            [c, h, w] => (*c, *h, *w),
            s => return Err(dim_err!("resize expects [C,H,W], got {:?}", s)),
        };
        if h == 0 || w == 0 || out_h == 0 || out_w == 0 {
            return Err(dim_err!("resize with a zero extent"));
        }
        let ty = bilinear_taps(h, out_h);
        let tx = bilinear_taps(w, out_w);
        let xs = self.value(x);
        let mut out = vec![0.0; c * out_h * out_w];
        for ch in 0..c {
            let plane = &xs[ch * h * w..(ch + 1) * h * w];
            let dst = &mut out[ch * out_h * out_w..(ch + 1) * out_h * out_w];
            for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                    let bot = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                    dst[oy * out_w + ox] = top * (1.0 - fy) + bot * fy;
                }
            }
        }
        let rg = self.rg(&[x]);
        self.push(vec![c, out_h, out_w], out, Op::Resize { x, out_h, out_w }, rg)
    }

    /// Unfolds `k×k` neighbourhoods of a zero-padded `[C, H, W]` map into
    /// `[C·k·k, H·W]` columns (stride 1, output size equal to input size when
    /// `pad = k/2`).
    pub fn im2col(&mut self, x: Var, k: usize, pad: usize) -> Result<Var> {
        let (c, h, w) = match self.shape(x) {
            [c, h, w] => (*c, *h, *w),
            s => return Err(dim_err!("im2col expects [C,H,W], got {:?}", s)),
        };
        if k == 0 || 2 * pad + 1 != k {
            return Err(dim_err!("im2col supports odd kernels with same padding, got k={k} pad={pad}"));
        }
        let xs = self.value(x);
        let hw = h * w;
        let mut out = vec![0.0; c * k * k * hw];
        for ch in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ch * k + ky) * k + kx;
                    let dst = &mut out[row * hw..(row + 1) * hw];
                    for y in 0..h {
                        let sy = y as isize + ky as isize - pad as isize;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        for xx in 0..w {
                            let sx = xx as isize + kx as isize - pad as isize;
                            if sx < 0 || sx >= w as isize {
                                continue;
                            }
                            dst[y * w + xx] = xs[ch * hw + sy as usize * w + sx as usize];
                        }
                    }
                }
            }
        }
        let rg = self.rg(&[x]);
        self.push(vec![c * k * k, hw], out, Op::Im2Col { x, k, pad }, rg)
    }

    /// Runs reverse accumulation from a one-element `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Tape("backward already ran on this tape; call reset_grads first".into()));
        }
        if self.node(loss).data.len() != 1 {
            return Err(dim_err!("backward needs a scalar loss, got shape {:?}", self.shape(loss)));
        }
        self.backward_done = true;
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if !self.node(loss).requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = self.grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let mut g = g;
            if self.fault == Some(self.nodes[idx].op.kind()) {
                g.iter_mut().for_each(|v| *v = *v * 1.01 + 1e-3);
            }
            self.backward_node(idx, &g);
            self.grads[idx] = Some(g);
        }
        Ok(())
    }

    /// Clears gradients so the tape can run backward again.
    pub fn reset_grads(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradient of `v` into `t`'s grad buffer (which must exist).
    pub fn accumulate_into(&self, v: Var, t: &mut Tensor) -> Result<()> {
        if let Some(g) = self.grad(v) {
            t.accumulate_grad(g)?;
        }
        Ok(())
    }

    fn acc(&mut self, v: Var) -> Option<&mut Vec<f64>> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        let n = node.shape.iter().product();
        Some(self.grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn backward_node(&mut self, idx: usize, g: &[f64]) {
        // Inputs always precede idx, so their grad slots are disjoint from g.
        let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let n = self.nodes[b.0].shape[1];
                if self.nodes[a.0].requires_grad {
                    let bv = std::mem::take(&mut self.nodes[b.0].data);
                    let ga = self.acc(*a).unwrap();
                    gemm(m, n, k, g, n, 1, &bv, 1, n, ga, true);
                    self.nodes[b.0].data = bv;
                }
                if self.nodes[b.0].requires_grad {
                    let av = std::mem::take(&mut self.nodes[a.0].data);
                    let gb = self.acc(*b).unwrap();
                    gemm(k, m, n, &av, 1, k, g, n, 1, gb, true);
                    self.nodes[a.0].data = av;
                }
            }
            Op::Add(a, b) => {
                if let Some(ga) = self.acc(*a) {
                    ga.iter_mut().zip(g).for_each(|(o, v)| *o += v);
                }
                if let Some(gb) = self.acc(*b) {
                    gb.iter_mut().zip(g).for_each(|(o, v)| *o += v);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.acc(*a) {
                    ga.iter_mut().zip(g).for_each(|(o, v)| *o += v);
                }
                if let Some(gb) = self.acc(*b) {
                    gb.iter_mut().zip(g).for_each(|(o, v)| *o -= v);
                }
            }
            Op::Mul(a, b) => {
                if self.nodes[a.0].requires_grad {
                    let bv = std::mem::take(&mut self.nodes[b.0].data);
                    let ga = self.acc(*a).unwrap();
                    for ((o, gv), bvv) in ga.iter_mut().zip(g).zip(&bv) {
                        *o += gv * bvv;
                    }
                    self.nodes[b.0].data = bv;
                }
                if self.nodes[b.0].requires_grad {
                    let av = std::mem::take(&mut self.nodes[a.0].data);
                    let gb = self.acc(*b).unwrap();
                    for ((o, gv), avv) in gb.iter_mut().zip(g).zip(&av) {
                        *o += gv * avv;
                    }
                    self.nodes[a.0].data = av;
                }
            }
            Op::AddRow(x, b) => {
                let d = self.nodes[x.0].shape[1];
                if let Some(gx) = self.acc(*x) {
                    gx.iter_mut().zip(g).for_each(|(o, v)| *o += v);
                }
                if let Some(gb) = self.acc(*b) {
                    for row in g.chunks_exact(d) {
                        gb.iter_mut().zip(row).for_each(|(o, v)| *o += v);
                    }
                }
            }
            Op::AddCol(x, b) => {
                let c = self.nodes[x.0].shape[0];
                let inner = g.len() / c.max(1);
                if let Some(gx) = self.acc(*x) {
                    gx.iter_mut().zip(g).for_each(|(o, v)| *o += v);
                }
                if let Some(gb) = self.acc(*b) {
                    if inner > 0 {
                        for (o, chunk) in gb.iter_mut().zip(g.chunks_exact(inner)) {
                            *o += chunk.iter().sum::<f64>();
                        }
                    }
                }
            }
            Op::Scale(x, s) => {
                let s = *s;
                if let Some(gx) = self.acc(*x) {
                    gx.iter_mut().zip(g).for_each(|(o, v)| *o += v * s);
                }
            }
            Op::Gelu(x) => {
                let xv = std::mem::take(&mut self.nodes[x.0].data);
                if let Some(gx) = self.acc(*x) {
                    for ((o, gv), xx) in gx.iter_mut().zip(g).zip(&xv) {
                        *o += gv * gelu_grad(*xx);
                    }
                }
                self.nodes[x.0].data = xv;
            }
            Op::Relu(x) => {
                let xv = std::mem::take(&mut self.nodes[x.0].data);
                if let Some(gx) = self.acc(*x) {
                    for ((o, gv), xx) in gx.iter_mut().zip(g).zip(&xv) {
                        if *xx > 0.0 {
                            *o += gv;
                        }
                    }
                }
                self.nodes[x.0].data = xv;
            }
            Op::Softmax(x) => {
                let c = self.nodes[idx].shape[1];
                let y = std::mem::take(&mut self.nodes[idx].data);
                if let Some(gx) = self.acc(*x) {
                    for ((gxr, gr), yr) in gx.chunks_exact_mut(c).zip(g.chunks_exact(c)).zip(y.chunks_exact(c)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            gxr[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
                self.nodes[idx].data = y;
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let d = self.nodes[x.0].shape[1];
                let gv = self.nodes[gain.0].data.clone();
                if let Some(gg) = self.acc(*gain) {
                    for (gr, hr) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                        for j in 0..d {
                            gg[j] += gr[j] * hr[j];
                        }
                    }
                }
                if let Some(gb) = self.acc(*bias) {
                    for gr in g.chunks_exact(d) {
                        gb.iter_mut().zip(gr).for_each(|(o, v)| *o += v);
                    }
                }
                if let Some(gx) = self.acc(*x) {
                    let mut dh = vec![0.0; d];
                    for (i, (gr, hr)) in g.chunks_exact(d).zip(xhat.chunks_exact(d)).enumerate() {
                        for j in 0..d {
                            dh[j] = gr[j] * gv[j];
                        }
                        let m1 = dh.iter().sum::<f64>() / d as f64;
                        let m2 = dh.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        let out = &mut gx[i * d..(i + 1) * d];
                        for j in 0..d {
                            out[j] += rstd[i] * (dh[j] - m1 - hr[j] * m2);
                        }
                    }
                }
            }
            Op::Concat { inputs, axis } => {
                let base = self.nodes[idx].shape.clone();
                let outer: usize = base[..*axis].iter().product();
                let inner: usize = base[axis + 1..].iter().product();
                let row = base[*axis] * inner;
                let mut offset = 0;
                for v in inputs {
                    let chunk = self.nodes[v.0].shape[*axis] * inner;
                    if let Some(gv) = self.acc(*v) {
                        for o in 0..outer {
                            let src = &g[o * row + offset..o * row + offset + chunk];
                            gv[o * chunk..(o + 1) * chunk].iter_mut().zip(src).for_each(|(a, b)| *a += b);
                        }
                    }
                    offset += chunk;
                }
            }
            Op::Slice { x, ranges } => {
                let shape = self.nodes[x.0].shape.clone();
                if let Some(gx) = self.acc(*x) {
                    let mut pos = 0;
                    for_each_slice_offset(&shape, ranges, |off, len| {
                        gx[off..off + len].iter_mut().zip(&g[pos..pos + len]).for_each(|(a, b)| *a += b);
                        pos += len;
                    });
                }
            }
            Op::Transpose(x) => {
                let (r, c) = (self.nodes[x.0].shape[0], self.nodes[x.0].shape[1]);
                if let Some(gx) = self.acc(*x) {
                    for i in 0..r {
                        for j in 0..c {
                            gx[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = self.acc(*x) {
                    gx.iter_mut().zip(g).for_each(|(o, v)| *o += v);
                }
            }
            Op::Sum(x) => {
                let g0 = g[0];
                if let Some(gx) = self.acc(*x) {
                    gx.iter_mut().for_each(|o| *o += g0);
                }
            }
            Op::Mean(x) => {
                let n = self.nodes[x.0].data.len() as f64;
                let g0 = g[0] / n;
                if let Some(gx) = self.acc(*x) {
                    gx.iter_mut().for_each(|o| *o += g0);
                }
            }
            Op::MeanRows(x) => {
                let (r, c) = (self.nodes[x.0].shape[0], self.nodes[x.0].shape[1]);
                if let Some(gx) = self.acc(*x) {
                    for row in gx.chunks_exact_mut(c.max(1)) {
                        row.iter_mut().zip(g).for_each(|(o, v)| *o += v / r as f64);
                    }
                }
            }
            Op::Resize { x, out_h, out_w } => {
                let (c, h, w) = (self.nodes[x.0].shape[0], self.nodes[x.0].shape[1], self.nodes[x.0].shape[2]);
                let (out_h, out_w) = (*out_h, *out_w);
                let ty = bilinear_taps(h, out_h);
                let tx = bilinear_taps(w, out_w);
                if let Some(gx) = self.acc(*x) {
                    for ch in 0..c {
                        let plane = &mut gx[ch * h * w..(ch + 1) * h * w];
                        let src = &g[ch * out_h * out_w..(ch + 1) * out_h * out_w];
                        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                                let v = src[oy * out_w + ox];
                                plane[y0 * w + x0] += v * (1.0 - fy) * (1.0 - fx);
                                plane[y0 * w + x1] += v * (1.0 - fy) * fx;
                                plane[y1 * w + x0] += v * fy * (1.0 - fx);
                                plane[y1 * w + x1] += v * fy * fx;
                            }
                        }
                    }
                }
            }
            Op::Im2Col { x, k, pad } => {
                let (c, h, w) = (self.nodes[x.0].shape[0], self.nodes[x.0].shape[1], self.nodes[x.0].shape[2]);
                let (k, pad) = (*k, *pad);
                let hw = h * w;
                if let Some(gx) = self.acc(*x) {
                    for ch in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let row = (ch * k + ky) * k + kx;
                                let src = &g[row * hw..(row + 1) * hw];
                                for y in 0..h {
                                    let sy = y as isize + ky as isize - pad as isize;
                                    if sy < 0 || sy >= h as isize {
                                        continue;
                                    }
                                    for xx in 0..w {
                                        let sx = xx as isize + kx as isize - pad as isize;
                                        if sx < 0 || sx >= w as isize {
                                            continue;
                                        }
                                        gx[ch * hw + sy as usize * w + sx as usize] += src[y * w + xx];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        self.nodes[idx].op = op;
    }
}

/// Calls `f(offset, len)` for each contiguous run of the sub-block `ranges`
/// inside a row-major tensor of `shape`, in row-major order.
fn for_each_slice_offset(shape: &[usize], ranges: &[Range<usize>], mut f: impl FnMut(usize, usize)) {
    let rank = shape.len();
    if rank == 0 || ranges.iter().any(|r| r.is_empty()) {
        return;
    }
    let mut strides = vec![1; rank];
    for i in (0..rank - 1).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    let run = ranges[rank - 1].end - ranges[rank - 1].start;
    let mut idx: Vec<usize> = ranges.iter().map(|r| r.start).collect();
    loop {
        let off: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        f(off, run);
        // advance the outer (rank-1) axes odometer-style
        let mut axis = rank - 1;
        loop {
            if axis == 0 {
                return;
            }
            axis -= 1;
            idx[axis] += 1;
            if idx[axis] < ranges[axis].end {
                break;
            }
            idx[axis] = ranges[axis].start;
        }
    }
}
