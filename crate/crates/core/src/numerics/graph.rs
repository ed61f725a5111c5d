//! Reverse-mode tape over [`Tensor`] values.
//!
//! A [`Graph`] records every forward operation together with whatever it needs
//! for the backward pass. Parameters are borrowed from a [`ParamStore`] rather
//! than copied, so building a graph per example stays cheap even with a large
//! item-ID table. Gradients flow back in a single reverse sweep; intermediate
//! gradient buffers are released as soon as they have been propagated.

use std::collections::{BTreeMap, HashMap};

use rand::Rng;

use super::gemm::{gemm_acc, MatRef};
use super::memory::Buffer;
use super::param::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Value<'p> {
    Owned(Tensor),
    Borrowed(&'p Tensor),
}

impl Value<'_> {
    fn get(&self) -> &Tensor {
        match self {
            Value::Owned(t) => t,
            Value::Borrowed(t) => t,
        }
    }
}

enum Op {
    Input,
    Leaf,
    Param(ParamId),
    Linear { x: Var, w: Var, b: Option<Var> },
    MatMul { a: Var, b: Var },
    MatMulNT { a: Var, b: Var, scale: f64 },
    Add { a: Var, b: Var },
    Scale { x: Var, factor: f64 },
    ScaleBy { x: Var, s: Var },
    ConcatCols { parts: Vec<Var> },
    SliceCols { x: Var, start: usize },
    Transpose { x: Var },
    Conv1d { x: Var, kernel: Var, bias: Var, stride: usize, pad_left: usize, cols: Buffer },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Buffer, rstd: Vec<f64> },
    Gelu { x: Var },
    WindowMean { x: Var, windows: Vec<(usize, usize)>, along_rows: bool },
    Dropout { x: Var, mask: Buffer },
    Embedding { table: ParamId, rows: Vec<usize> },
    MaskRows { x: Var, keep: Vec<bool> },
    MeanRows { x: Var },
    SoftmaxRows { x: Var },
    Sum { x: Var },
    WeightedSum { x: Var, weights: Vec<f64> },
    BceLogits { logits: Var },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Input | Op::Leaf | Op::Param(_) | Op::Embedding { .. } => vec![],
            Op::Linear { x, w, b } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Op::MatMul { a, b } | Op::MatMulNT { a, b, .. } | Op::Add { a, b } => vec![*a, *b],
            Op::ScaleBy { x, s } => vec![*x, *s],
            Op::ConcatCols { parts } => parts.clone(),
            Op::Conv1d { x, kernel, bias, .. } => vec![*x, *kernel, *bias],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Scale { x, .. }
            | Op::SliceCols { x, .. }
            | Op::Transpose { x }
            | Op::Gelu { x }
            | Op::WindowMean { x, .. }
            | Op::Dropout { x, .. }
            | Op::MaskRows { x, .. }
            | Op::MeanRows { x }
            | Op::SoftmaxRows { x }
            | Op::Sum { x }
            | Op::WeightedSum { x, .. } => vec![*x],
            Op::BceLogits { logits } => vec![*logits],
        }
    }
}

struct Node<'p> {
    value: Value<'p>,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug, Default)]
pub struct Gradients {
    params: BTreeMap<ParamId, Buffer>,
    sparse: BTreeMap<ParamId, BTreeMap<usize, Vec<f64>>>,
    leaves: HashMap<Var, Buffer>,
}

impl Gradients {
    /// Gradient with respect to a leaf created by [`Graph::leaf`].
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.leaves.get(&v).map(|b| &b[..])
    }

    /// Dense gradients of parameters used directly as graph nodes.
    pub fn dense_params(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.params.iter().map(|(id, b)| (*id, &b[..]))
    }

    /// Row-sparse gradients of lookup tables.
    pub fn sparse_params(&self) -> impl Iterator<Item = (ParamId, impl Iterator<Item = (usize, &[f64])>)> {
        self.sparse
            .iter()
            .map(|(id, rows)| (*id, rows.iter().map(|(r, g)| (*r, g.as_slice()))))
    }

    /// Rows of a lookup table that received gradient.
    pub fn touched_rows(&self, id: ParamId) -> Vec<usize> {
        self.sparse.get(&id).map(|m| m.keys().copied().collect()).unwrap_or_default()
    }

    /// Full dense gradient for a parameter, merging sparse rows.
    pub fn param_dense(&self, id: ParamId, store: &ParamStore) -> Vec<f64> {
        let value = store.value(id);
        let mut out = vec![0.0; value.len()];
        if let Some(g) = self.params.get(&id) {
            for (o, v) in out.iter_mut().zip(g.iter()) {
                *o += v;
            }
        }
        if let Some(rows) = self.sparse.get(&id) {
            let w = value.cols();
            for (r, g) in rows {
                for (o, v) in out[r * w..(r + 1) * w].iter_mut().zip(g) {
                    *o += v;
                }
            }
        }
        out
    }
}

pub struct Graph<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node<'p>>,
    param_vars: HashMap<ParamId, Var>,
}

fn gelu_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

fn gelu_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Exact GELU, `x·Φ(x)`.
pub fn gelu_scalar(x: f64) -> f64 {
    x * gelu_cdf(x)
}

/// `log(1 + exp(x))` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn two_d(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    if t.rank() != 2 {
        return Err(Error::dim(op, t.shape(), &[0, 0]));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

impl<'p> Graph<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Graph {
            store,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.nodes[v.0].value.get()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).data()[0]
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let needs_grad = match &op {
            Op::Input => false,
            Op::Leaf | Op::Param(_) | Op::Embedding { .. } => true,
            other => other.inputs().iter().any(|v| self.nodes[v.0].needs_grad),
        };
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant input; no gradient is tracked.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input)
    }

    /// An input whose gradient is reported by [`Gradients::wrt`].
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars.get(&id) {
            return *v;
        }
        self.nodes.push(Node {
            value: Value::Borrowed(self.store.value(id)),
            op: Op::Param(id),
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    /// `x·w + b` for `x: n×p`, `w: p×q`, `b: q`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xt, wt) = (self.value(x), self.value(w));
        let (n, p) = two_d(xt, "linear")?;
        let (pw, q) = two_d(wt, "linear")?;
        if p != pw {
            return Err(Error::dim("linear", xt.shape(), wt.shape()));
        }
        let mut out = Buffer::zeros(n * q);
        if let Some(b) = b {
            let bt = self.value(b);
            if bt.len() != q {
                return Err(Error::dim("linear bias", wt.shape(), bt.shape()));
            }
            for row in out.chunks_mut(q.max(1)) {
                row.copy_from_slice(bt.data());
            }
        }
        gemm_acc(1.0, MatRef::new(xt.data(), n, p), MatRef::new(wt.data(), p, q), &mut out);
        Ok(self.push(Tensor::from_buffer(vec![n, q], out), Op::Linear { x, w, b }))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (at, bt) = (self.value(a), self.value(b));
        let (m, k) = two_d(at, "matmul")?;
        let (kb, n) = two_d(bt, "matmul")?;
        if k != kb {
            return Err(Error::dim("matmul", at.shape(), bt.shape()));
        }
        let mut out = Buffer::zeros(m * n);
        gemm_acc(1.0, MatRef::new(at.data(), m, k), MatRef::new(bt.data(), k, n), &mut out);
        Ok(self.push(Tensor::from_buffer(vec![m, n], out), Op::MatMul { a, b }))
    }

    /// `scale · a · bᵀ` for `a: m×k`, `b: n×k`.
    pub fn matmul_nt(&mut self, a: Var, b: Var, scale: f64) -> Result<Var> {
        let (at, bt) = (self.value(a), self.value(b));
        let (m, k) = two_d(at, "matmul_nt")?;
        let (n, kb) = two_d(bt, "matmul_nt")?;
        if k != kb {
            return Err(Error::dim("matmul_nt", at.shape(), bt.shape()));
        }
        let mut out = Buffer::zeros(m * n);
        gemm_acc(scale, MatRef::new(at.data(), m, k), MatRef::new(bt.data(), n, k).t(), &mut out);
        Ok(self.push(Tensor::from_buffer(vec![m, n], out), Op::MatMulNT { a, b, scale }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (at, bt) = (self.value(a), self.value(b));
        if at.shape() != bt.shape() {
            return Err(Error::dim("add", at.shape(), bt.shape()));
        }
        let data = at.data().iter().zip(bt.data()).map(|(x, y)| x + y).collect();
        let shape = at.shape().to_vec();
        Ok(self.push(Tensor::from_buffer(shape, Buffer::from_vec(data)), Op::Add { a, b }))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let xt = self.value(x);
        let data = xt.data().iter().map(|v| v * factor).collect();
        let shape = xt.shape().to_vec();
        self.push(Tensor::from_buffer(shape, Buffer::from_vec(data)), Op::Scale { x, factor })
    }

    /// Multiplies `x` by the single-element tensor `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        let st = self.value(s);
        if st.len() != 1 {
            return Err(Error::dim("scale_by", st.shape(), &[1]));
        }
        let factor = st.data()[0];
        let xt = self.value(x);
        let data = xt.data().iter().map(|v| v * factor).collect();
        let shape = xt.shape().to_vec();
        Ok(self.push(Tensor::from_buffer(shape, Buffer::from_vec(data)), Op::ScaleBy { x, s }))
    }

    /// Concatenates 2-D tensors with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = self.value(p);
            let (r, c) = two_d(t, "concat_cols")?;
            if r != rows {
                return Err(Error::dim("concat_cols", self.value(parts[0]).shape(), t.shape()));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Buffer::zeros(rows * total);
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let t = self.value(p);
            for r in 0..rows {
                out[r * total + offset..r * total + offset + w].copy_from_slice(t.row(r));
            }
            offset += w;
        }
        Ok(self.push(
            Tensor::from_buffer(vec![rows, total], out),
            Op::ConcatCols { parts: parts.to_vec() },
        ))
    }

    /// Columns `start..start + width` of a 2-D tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let xt = self.value(x);
        let (rows, cols) = two_d(xt, "slice_cols")?;
        if start + width > cols {
            return Err(Error::Index {
                what: "column slice",
                index: start + width,
                len: cols,
            });
        }
        let mut out = Buffer::zeros(rows * width);
        for r in 0..rows {
            out[r * width..(r + 1) * width].copy_from_slice(&xt.row(r)[start..start + width]);
        }
        Ok(self.push(Tensor::from_buffer(vec![rows, width], out), Op::SliceCols { x, start }))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        two_d(self.value(x), "transpose")?;
        let t = self.value(x).transposed();
        Ok(self.push(t, Op::Transpose { x }))
    }

    /// Cross-correlation of `x: C_in×L` with `kernel: C_out×C_in×K`, zero padding
    /// `(left, right)` and the given stride. Output is `C_out×L_out` with
    /// `L_out = (L + left + right − K)/stride + 1`.
    pub fn conv1d(&mut self, x: Var, kernel: Var, bias: Var, stride: usize, pad: (usize, usize)) -> Result<Var> {
        let (xt, kt, bt) = (self.value(x), self.value(kernel), self.value(bias));
        let (c_in, len) = two_d(xt, "conv1d")?;
        if kt.rank() != 3 || kt.shape()[1] != c_in {
            return Err(Error::dim("conv1d", xt.shape(), kt.shape()));
        }
        let (c_out, k) = (kt.shape()[0], kt.shape()[2]);
        if bt.len() != c_out {
            return Err(Error::dim("conv1d bias", kt.shape(), bt.shape()));
        }
        if stride == 0 || k == 0 {
            return Err(Error::Config("conv1d needs kernel ≥ 1 and stride ≥ 1".into()));
        }
        let padded = len + pad.0 + pad.1;
        if k > padded {
            return Err(Error::Config(format!("kernel {k} exceeds padded length {padded}")));
        }
        let l_out = (padded - k) / stride + 1;
        let xd = xt.data();
        let mut cols = Buffer::zeros(c_in * k * l_out);
        for c in 0..c_in {
            for kk in 0..k {
                let row = &mut cols[(c * k + kk) * l_out..(c * k + kk + 1) * l_out];
                for (t, slot) in row.iter_mut().enumerate() {
                    let pos = t * stride + kk;
                    if pos >= pad.0 && pos - pad.0 < len {
                        *slot = xd[c * len + pos - pad.0];
                    }
                }
            }
        }
        let mut out = Buffer::zeros(c_out * l_out);
        for (o, row) in out.chunks_mut(l_out).enumerate() {
            row.fill(bt.data()[o]);
        }
        gemm_acc(
            1.0,
            MatRef::new(kt.data(), c_out, c_in * k),
            MatRef::new(&cols, c_in * k, l_out),
            &mut out,
        );
        Ok(self.push(
            Tensor::from_buffer(vec![c_out, l_out], out),
            Op::Conv1d {
                x,
                kernel,
                bias,
                stride,
                pad_left: pad.0,
                cols,
            },
        ))
    }

    /// Row-wise layer normalization of `x: n×d` with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (xt, gt, bt) = (self.value(x), self.value(gamma), self.value(beta));
        let (n, d) = two_d(xt, "layer_norm")?;
        if gt.len() != d || bt.len() != d {
            return Err(Error::dim("layer_norm", xt.shape(), gt.shape()));
        }
        let mut xhat = Buffer::zeros(n * d);
        let mut out = Buffer::zeros(n * d);
        let mut rstd = Vec::with_capacity(n);
        for r in 0..n {
            let row = xt.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd.push(rs);
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gt.data()[j] + bt.data()[j];
            }
        }
        Ok(self.push(
            Tensor::from_buffer(vec![n, d], out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        ))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let xt = self.value(x);
        let data = xt.data().iter().map(|&v| gelu_scalar(v)).collect();
        let shape = xt.shape().to_vec();
        self.push(Tensor::from_buffer(shape, Buffer::from_vec(data)), Op::Gelu { x })
    }

    /// Average over explicit windows of rows (`along_rows`) or columns.
    ///
    /// Windows are half-open ranges in real coordinates; any part beyond the
    /// tensor is padding and is excluded from the count. A window with no real
    /// element yields zero.
    pub fn window_mean(&mut self, x: Var, windows: &[(usize, usize)], along_rows: bool) -> Result<Var> {
        let xt = self.value(x);
        let (rows, cols) = two_d(xt, "window_mean")?;
        let len = if along_rows { rows } else { cols };
        let windows: Vec<(usize, usize)> = windows.iter().map(|&(s, e)| (s.min(len), e.min(len))).collect();
        let m = windows.len();
        let (out_shape, mut out) = if along_rows {
            (vec![m, cols], Buffer::zeros(m * cols))
        } else {
            (vec![rows, m], Buffer::zeros(rows * m))
        };
        for (i, &(s, e)) in windows.iter().enumerate() {
            if e <= s {
                continue;
            }
            let inv = 1.0 / (e - s) as f64;
            if along_rows {
                for r in s..e {
                    for (o, v) in out[i * cols..(i + 1) * cols].iter_mut().zip(xt.row(r)) {
                        *o += v * inv;
                    }
                }
            } else {
                for r in 0..rows {
                    let row = xt.row(r);
                    out[r * m + i] = row[s..e].iter().sum::<f64>() * inv;
                }
            }
        }
        Ok(self.push(
            Tensor::from_buffer(out_shape, out),
            Op::WindowMean {
                x,
                windows,
                along_rows,
            },
        ))
    }

    /// Average pooling of `x: d×L` along its length, padded positions excluded.
    pub fn avg_pool1d(&mut self, x: Var, window: usize, stride: usize, pad: (usize, usize)) -> Result<Var> {
        let len = self.value(x).cols();
        let windows = pool_windows(len, window, stride, pad)?;
        self.window_mean(x, &windows, false)
    }

    /// Inverted dropout. Identity when not training or when `rate == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, training: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let xt = self.value(x);
        let mask: Vec<f64> = (0..xt.len())
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let data = xt.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let shape = xt.shape().to_vec();
        Ok(self.push(
            Tensor::from_buffer(shape, Buffer::from_vec(data)),
            Op::Dropout {
                x,
                mask: Buffer::from_vec(mask),
            },
        ))
    }

    /// Gathers rows of a lookup-table parameter. Gradients are row-sparse.
    pub fn embedding(&mut self, table: ParamId, rows: &[usize]) -> Result<Var> {
        let tt = self.store.value(table);
        let (n_rows, d) = two_d(tt, "embedding")?;
        let mut out = Buffer::zeros(rows.len() * d);
        for (i, &r) in rows.iter().enumerate() {
            if r >= n_rows {
                return Err(Error::Index {
                    what: "embedding table",
                    index: r,
                    len: n_rows,
                });
            }
            out[i * d..(i + 1) * d].copy_from_slice(tt.row(r));
        }
        Ok(self.push(
            Tensor::from_buffer(vec![rows.len(), d], out),
            Op::Embedding {
                table,
                rows: rows.to_vec(),
            },
        ))
    }

    /// Zeroes rows whose `keep` flag is false.
    pub fn mask_rows(&mut self, x: Var, keep: &[bool]) -> Result<Var> {
        let xt = self.value(x);
        let (rows, cols) = two_d(xt, "mask_rows")?;
        if keep.len() != rows {
            return Err(Error::dim("mask_rows", xt.shape(), &[keep.len()]));
        }
        let mut out = Buffer::zeros(rows * cols);
        for (r, &k) in keep.iter().enumerate() {
            if k {
                out[r * cols..(r + 1) * cols].copy_from_slice(xt.row(r));
            }
        }
        Ok(self.push(
            Tensor::from_buffer(vec![rows, cols], out),
            Op::MaskRows { x, keep: keep.to_vec() },
        ))
    }

    /// Mean over rows, `n×d → 1×d`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let xt = self.value(x);
        let (rows, cols) = two_d(xt, "mean_rows")?;
        if rows == 0 {
            return Err(Error::dim("mean_rows", xt.shape(), &[1, cols]));
        }
        let mut out = Buffer::zeros(cols);
        for r in 0..rows {
            for (o, v) in out.iter_mut().zip(xt.row(r)) {
                *o += v / rows as f64;
            }
        }
        Ok(self.push(Tensor::from_buffer(vec![1, cols], out), Op::MeanRows { x }))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let xt = self.value(x);
        let (rows, cols) = two_d(xt, "softmax_rows")?;
        let mut out = Buffer::zeros(rows * cols);
        for r in 0..rows {
            let row = xt.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let dst = &mut out[r * cols..(r + 1) * cols];
            let mut total = 0.0;
            for (o, v) in dst.iter_mut().zip(row) {
                *o = (v - max).exp();
                total += *o;
            }
            for o in dst.iter_mut() {
                *o /= total;
            }
        }
        Ok(self.push(Tensor::from_buffer(vec![rows, cols], out), Op::SoftmaxRows { x }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum { x })
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1) as f64;
        self.weighted_sum(x, &vec![1.0 / n; self.value(x).len()])
            .expect("weights sized from the tensor")
    }

    /// `Σ wᵢ·xᵢ` over all entries.
    pub fn weighted_sum(&mut self, x: Var, weights: &[f64]) -> Result<Var> {
        let xt = self.value(x);
        if xt.len() != weights.len() {
            return Err(Error::dim("weighted_sum", xt.shape(), &[weights.len()]));
        }
        let s = xt.data().iter().zip(weights).map(|(a, b)| a * b).sum();
        Ok(self.push(
            Tensor::scalar(s),
            Op::WeightedSum {
                x,
                weights: weights.to_vec(),
            },
        ))
    }

    /// Binary cross-entropy on raw logits: entry 0 is the positive, the rest are
    /// negatives. Uses the stable `softplus` form.
    pub fn bce_logits(&mut self, logits: Var) -> Result<Var> {
        let lt = self.value(logits);
        if lt.is_empty() {
            return Err(Error::dim("bce_logits", lt.shape(), &[1]));
        }
        let z = lt.data();
        let loss = softplus(-z[0]) + z[1..].iter().map(|&v| softplus(v)).sum::<f64>();
        Ok(self.push(Tensor::scalar(loss), Op::BceLogits { logits }))
    }

    /// Runs the reverse sweep from a single-element output.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(Error::dim("backward", lt.shape(), &[1]));
        }
        let mut grads: Vec<Option<Buffer>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Buffer::from_vec(vec![1.0]));
        let mut sparse: BTreeMap<ParamId, BTreeMap<usize, Vec<f64>>> = BTreeMap::new();

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Input | Op::Leaf | Op::Param(_)) || !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads, &mut sparse);
        }

        let mut out = Gradients {
            sparse,
            ..Default::default()
        };
        for (i, node) in self.nodes.iter().enumerate().take(loss.0 + 1) {
            match node.op {
                Op::Param(id) => {
                    if let Some(g) = grads[i].take() {
                        out.params.insert(id, g);
                    }
                }
                Op::Leaf => {
                    let g = grads[i].take().unwrap_or_else(|| Buffer::zeros(node.value.get().len()));
                    out.leaves.insert(Var(i), g);
                }
                _ => {}
            }
        }
        Ok(out)
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Buffer>], v: Var) -> Option<&'g mut Buffer> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let n = self.value(v).len();
        Some(grads[v.0].get_or_insert_with(|| Buffer::zeros(n)))
    }

    fn propagate(
        &self,
        i: usize,
        g: &[f64],
        grads: &mut [Option<Buffer>],
        sparse: &mut BTreeMap<ParamId, BTreeMap<usize, Vec<f64>>>,
    ) {
        let out = self.nodes[i].value.get();
        match &self.nodes[i].op {
            Op::Input | Op::Leaf | Op::Param(_) => {}
            Op::Linear { x, w, b } => {
                let (xt, wt) = (self.value(*x), self.value(*w));
                let (n, p) = (xt.rows(), xt.cols());
                let q = wt.cols();
                let gm = MatRef::new(g, n, q);
                if let Some(dx) = self.slot(grads, *x) {
                    gemm_acc(1.0, gm, MatRef::new(wt.data(), p, q).t(), dx);
                }
                if let Some(dw) = self.slot(grads, *w) {
                    gemm_acc(1.0, MatRef::new(xt.data(), n, p).t(), gm, dw);
                }
                if let Some(b) = b {
                    if let Some(db) = self.slot(grads, *b) {
                        for row in g.chunks(q.max(1)) {
                            for (d, v) in db.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                    }
                }
            }
            Op::MatMul { a, b } => {
                let (at, bt) = (self.value(*a), self.value(*b));
                let (m, k, n) = (at.rows(), at.cols(), bt.cols());
                let gm = MatRef::new(g, m, n);
                if let Some(da) = self.slot(grads, *a) {
                    gemm_acc(1.0, gm, MatRef::new(bt.data(), k, n).t(), da);
                }
                if let Some(db) = self.slot(grads, *b) {
                    gemm_acc(1.0, MatRef::new(at.data(), m, k).t(), gm, db);
                }
            }
            Op::MatMulNT { a, b, scale } => {
                let (at, bt) = (self.value(*a), self.value(*b));
                let (m, k, n) = (at.rows(), at.cols(), bt.rows());
                let gm = MatRef::new(g, m, n);
                if let Some(da) = self.slot(grads, *a) {
                    gemm_acc(*scale, gm, MatRef::new(bt.data(), n, k), da);
                }
                if let Some(db) = self.slot(grads, *b) {
                    gemm_acc(*scale, gm.t(), MatRef::new(at.data(), m, k), db);
                }
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    if let Some(d) = self.slot(grads, v) {
                        for (d, x) in d.iter_mut().zip(g) {
                            *d += x;
                        }
                    }
                }
            }
            Op::Scale { x, factor } => {
                if let Some(dx) = self.slot(grads, *x) {
                    for (d, v) in dx.iter_mut().zip(g) {
                        *d += factor * v;
                    }
                }
            }
            Op::ScaleBy { x, s } => {
                let factor = self.value(*s).data()[0];
                if let Some(dx) = self.slot(grads, *x) {
                    for (d, v) in dx.iter_mut().zip(g) {
                        *d += factor * v;
                    }
                }
                let xd = self.value(*x).data();
                if let Some(ds) = self.slot(grads, *s) {
                    ds[0] += g.iter().zip(xd).map(|(a, b)| a * b).sum::<f64>();
                }
            }
            Op::ConcatCols { parts } => {
                let (rows, total) = (out.rows(), out.cols());
                let mut offset = 0;
                for p in parts {
                    let w = self.value(*p).cols();
                    if let Some(dp) = self.slot(grads, *p) {
                        for r in 0..rows {
                            for (d, v) in dp[r * w..(r + 1) * w]
                                .iter_mut()
                                .zip(&g[r * total + offset..r * total + offset + w])
                            {
                                *d += v;
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::SliceCols { x, start } => {
                let cols = self.value(*x).cols();
                let (rows, width) = (out.rows(), out.cols());
                if let Some(dx) = self.slot(grads, *x) {
                    for r in 0..rows {
                        for (d, v) in dx[r * cols + start..r * cols + start + width]
                            .iter_mut()
                            .zip(&g[r * width..(r + 1) * width])
                        {
                            *d += v;
                        }
                    }
                }
            }
            Op::Transpose { x } => {
                let (r, c) = (out.rows(), out.cols());
                if let Some(dx) = self.slot(grads, *x) {
                    for i in 0..r {
                        for j in 0..c {
                            dx[j * r + i] += g[i * c + j];
                        }
                    }
                }
            }
            Op::Conv1d {
                x,
                kernel,
                bias,
                stride,
                pad_left,
                cols,
            } => {
                let (xt, kt) = (self.value(*x), self.value(*kernel));
                let (c_in, len) = (xt.rows(), xt.cols());
                let (c_out, k) = (kt.shape()[0], kt.shape()[2]);
                let l_out = out.cols();
                let gm = MatRef::new(g, c_out, l_out);
                if let Some(dk) = self.slot(grads, *kernel) {
                    gemm_acc(1.0, gm, MatRef::new(cols, c_in * k, l_out).t(), dk);
                }
                if let Some(db) = self.slot(grads, *bias) {
                    for (o, row) in g.chunks(l_out).enumerate() {
                        db[o] += row.iter().sum::<f64>();
                    }
                }
                if self.nodes[x.0].needs_grad {
                    let mut dcols = vec![0.0; c_in * k * l_out];
                    gemm_acc(1.0, MatRef::new(kt.data(), c_out, c_in * k).t(), gm, &mut dcols);
                    let dx = self.slot(grads, *x).expect("needs_grad checked");
                    for c in 0..c_in {
                        for kk in 0..k {
                            let row = &dcols[(c * k + kk) * l_out..(c * k + kk + 1) * l_out];
                            for (t, v) in row.iter().enumerate() {
                                let pos = t * stride + kk;
                                if pos >= *pad_left && pos - pad_left < len {
                                    dx[c * len + pos - pad_left] += v;
                                }
                            }
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (n, d) = (out.rows(), out.cols());
                let gam = self.value(*gamma).data();
                if let Some(dg) = self.slot(grads, *gamma) {
                    for r in 0..n {
                        for j in 0..d {
                            dg[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                }
                if let Some(dbeta) = self.slot(grads, *beta) {
                    for r in 0..n {
                        for j in 0..d {
                            dbeta[j] += g[r * d + j];
                        }
                    }
                }
                if let Some(dx) = self.slot(grads, *x) {
                    let mut dxhat = vec![0.0; d];
                    for r in 0..n {
                        let h = &xhat[r * d..(r + 1) * d];
                        for j in 0..d {
                            dxhat[j] = g[r * d + j] * gam[j];
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / d as f64;
                        let mean_dh = dxhat.iter().zip(h).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for j in 0..d {
                            dx[r * d + j] += rstd[r] * (dxhat[j] - mean_d - h[j] * mean_dh);
                        }
                    }
                }
            }
            Op::Gelu { x } => {
                let xd = self.value(*x).data();
                if let Some(dx) = self.slot(grads, *x) {
                    for ((d, &v), gv) in dx.iter_mut().zip(xd).zip(g) {
                        *d += gv * (gelu_cdf(v) + v * gelu_pdf(v));
                    }
                }
            }
            Op::WindowMean {
                x,
                windows,
                along_rows,
            } => {
                let (rows, cols) = (self.value(*x).rows(), self.value(*x).cols());
                let m = windows.len();
                if let Some(dx) = self.slot(grads, *x) {
                    for (i, &(s, e)) in windows.iter().enumerate() {
                        if e <= s {
                            continue;
                        }
                        let inv = 1.0 / (e - s) as f64;
                        if *along_rows {
                            for r in s..e {
                                for (d, v) in dx[r * cols..(r + 1) * cols].iter_mut().zip(&g[i * cols..(i + 1) * cols]) {
                                    *d += v * inv;
                                }
                            }
                        } else {
                            for r in 0..rows {
                                let gv = g[r * m + i] * inv;
                                for d in &mut dx[r * cols + s..r * cols + e] {
                                    *d += gv;
                                }
                            }
                        }
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if let Some(dx) = self.slot(grads, *x) {
                    for ((d, m), v) in dx.iter_mut().zip(mask.iter()).zip(g) {
                        *d += m * v;
                    }
                }
            }
            Op::Embedding { table, rows } => {
                let d = out.cols();
                let entry = sparse.entry(*table).or_default();
                for (i, &r) in rows.iter().enumerate() {
                    let acc = entry.entry(r).or_insert_with(|| vec![0.0; d]);
                    for (a, v) in acc.iter_mut().zip(&g[i * d..(i + 1) * d]) {
                        *a += v;
                    }
                }
            }
            Op::MaskRows { x, keep } => {
                let cols = out.cols();
                if let Some(dx) = self.slot(grads, *x) {
                    for (r, &k) in keep.iter().enumerate() {
                        if k {
                            for (d, v) in dx[r * cols..(r + 1) * cols].iter_mut().zip(&g[r * cols..(r + 1) * cols]) {
                                *d += v;
                            }
                        }
                    }
                }
            }
            Op::MeanRows { x } => {
                let (rows, cols) = (self.value(*x).rows(), self.value(*x).cols());
                if let Some(dx) = self.slot(grads, *x) {
                    for r in 0..rows {
                        for (d, v) in dx[r * cols..(r + 1) * cols].iter_mut().zip(g) {
                            *d += v / rows as f64;
                        }
                    }
                }
            }
            Op::SoftmaxRows { x } => {
                let (rows, cols) = (out.rows(), out.cols());
                let y = out.data();
                if let Some(dx) = self.slot(grads, *x) {
                    for r in 0..rows {
                        let yr = &y[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((d, yv), gv) in dx[r * cols..(r + 1) * cols].iter_mut().zip(yr).zip(gr) {
                            *d += yv * (gv - dot);
                        }
                    }
                }
            }
            Op::Sum { x } => {
                if let Some(dx) = self.slot(grads, *x) {
                    for d in dx.iter_mut() {
                        *d += g[0];
                    }
                }
            }
            Op::WeightedSum { x, weights } => {
                if let Some(dx) = self.slot(grads, *x) {
                    for (d, w) in dx.iter_mut().zip(weights) {
                        *d += g[0] * w;
                    }
                }
            }
            Op::BceLogits { logits } => {
                let z = self.value(*logits).data();
                if let Some(dz) = self.slot(grads, *logits) {
                    dz[0] += g[0] * (sigmoid(z[0]) - 1.0);
                    for (d, &v) in dz[1..].iter_mut().zip(&z[1..]) {
                        *d += g[0] * sigmoid(v);
                    }
                }
            }
        }
    }
}

/// Windows for average pooling over a length-`len` axis with the given
/// geometry. Windows reaching into padding are clipped to real positions.
pub fn pool_windows(len: usize, window: usize, stride: usize, pad: (usize, usize)) -> Result<Vec<(usize, usize)>> {
    if window == 0 || stride == 0 {
        return Err(Error::Config("pooling needs window ≥ 1 and stride ≥ 1".into()));
    }
    let padded = len + pad.0 + pad.1;
    if window > padded {
        return Err(Error::Config(format!("pool window {window} exceeds padded length {padded}")));
    }
    let n = (padded - window) / stride + 1;
    Ok((0..n)
        .map(|t| {
            let start = (t * stride).saturating_sub(pad.0).min(len);
            let end = (t * stride + window).saturating_sub(pad.0).min(len);
            (start, end)
        })
        .collect())
}
