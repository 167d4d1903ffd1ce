//! Define-by-run reverse-mode tape.
//!
//! A [`Graph`] records every operation applied to its [`Var`] handles. After
//! the forward pass, [`Graph::backward`] walks the tape in reverse and returns
//! the gradient of a scalar loss with respect to every node that requires
//! one. A graph is built fresh for every forward pass and dropped afterwards.

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{shape_err, Result, TensorError};
use crate::gemm::gemm;
use crate::param::{ParamId, ParamStore};
use crate::resample::{ResampleMode, ResamplePlan};
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    AddRowBias(Var, Var),
    AddChannelBias(Var, Var),
    MatMul { a: Var, b: Var, trans_b: bool },
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    GroupNorm { x: Var, gamma: Var, beta: Var, groups: usize, xhat: Vec<f64>, rstd: Vec<f64> },
    Softmax(Var),
    LogSoftmax(Var),
    MaskedSoftmax { x: Var, scale: f64 },
    Gelu(Var),
    Sigmoid(Var),
    LogSigmoid(Var),
    Abs(Var),
    Square(Var),
    Embed { table: Var, idx: Vec<usize> },
    Gather { x: Var, idx: Vec<usize> },
    Reshape(Var),
    Transpose(Var),
    SliceRows { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    Interpolate { x: Var, plan: Arc<ResamplePlan> },
    DepthToSpace { x: Var, r: usize },
    Sum(Var),
    Mean(Var),
    StraightThrough(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

/// Boolean attention mask: `true` marks an allowed (query, key) pair.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    rows: usize,
    cols: usize,
    allowed: Vec<bool>,
}

impl Mask {
    pub fn new(rows: usize, cols: usize, allowed: Vec<bool>) -> Result<Self> {
        if allowed.len() != rows * cols {
            return Err(TensorError::LengthMismatch {
                shape: vec![rows, cols],
                len: allowed.len(),
            });
        }
        Ok(Self { rows, cols, allowed })
    }

    pub fn full(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            allowed: vec![true; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn allowed(&self, q: usize, k: usize) -> bool {
        self.allowed[q * self.cols + k]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.allowed
    }
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Adds every parameter gradient into the store.
    pub fn accumulate_into(&self, store: &mut ParamStore) -> Result<()> {
        for &(id, var) in &self.params {
            if let Some(g) = self.get(var) {
                store.accumulate_grad(id, g)?;
            }
        }
        Ok(())
    }
}

#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(ParamId, Var)>,
    bound: HashMap<ParamId, Var>,
    grad_enabled: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
            bound: HashMap::new(),
            grad_enabled: true,
        }
    }
}

fn check_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return shape_err(op, a.shape(), b.shape());
    }
    Ok(())
}

fn rank2(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    if t.rank() != 2 {
        return Err(TensorError::InvalidArgument {
            op,
            msg: format!("expected rank 2, got {:?}", t.shape()),
        });
    }
    Ok((t.dim(0), t.dim(1)))
}

fn rank3(op: &'static str, t: &Tensor) -> Result<(usize, usize, usize)> {
    if t.rank() != 3 {
        return Err(TensorError::InvalidArgument {
            op,
            msg: format!("expected [C, H, W], got {:?}", t.shape()),
        });
    }
    Ok((t.dim(0), t.dim(1), t.dim(2)))
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(sigmoid(x))` without overflow.
pub fn log_sigmoid(x: f64) -> f64 {
    x.min(0.0) - (-x.abs()).exp().ln_1p()
}

fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let cols = g.ho * g.wo;
    let mut out = vec![0.0; g.c * g.k * g.k * cols];
    for c in 0..g.c {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut out[row * cols..(row + 1) * cols];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &x[(c * g.h + iy as usize) * g.w..(c * g.h + iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[oy * g.wo + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    out
}

fn col2im(cols_buf: &[f64], g: &ConvGeom) -> Vec<f64> {
    let cols = g.ho * g.wo;
    let mut out = vec![0.0; g.c * g.h * g.w];
    for c in 0..g.c {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols_buf[row * cols..(row + 1) * cols];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = (c * g.h + iy as usize) * g.w;
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            out[base + ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Normalizes `n` contiguous groups of `len` values; returns (xhat, rstd).
fn normalize_groups(x: &[f64], len: usize, eps: f64) -> (Vec<f64>, Vec<f64>) {
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = Vec::with_capacity(x.len() / len.max(1));
    for (src, dst) in x.chunks(len).zip(xhat.chunks_mut(len)) {
        let mean = src.iter().sum::<f64>() / len as f64;
        let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / len as f64;
        let r = 1.0 / (var + eps).sqrt();
        for (d, s) in dst.iter_mut().zip(src) {
            *d = (s - mean) * r;
        }
        rstd.push(r);
    }
    (xhat, rstd)
}

/// Backward of a plain normalization given dL/dxhat.
fn normalize_backward(dxhat: &[f64], xhat: &[f64], rstd: &[f64], len: usize) -> Vec<f64> {
    let mut dx = vec![0.0; dxhat.len()];
    for (gi, ((dxh, xh), out)) in dxhat
        .chunks(len)
        .zip(xhat.chunks(len))
        .zip(dx.chunks_mut(len))
        .enumerate()
    {
        let n = len as f64;
        let s1: f64 = dxh.iter().sum();
        let s2: f64 = dxh.iter().zip(xh).map(|(a, b)| a * b).sum();
        let r = rstd[gi];
        for ((o, d), x) in out.iter_mut().zip(dxh).zip(xh) {
            *o = r / n * (n * d - s1 - x * s2);
        }
    }
    dx
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Graph that binds every parameter as a constant; nothing is recorded
    /// for differentiation.
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::default()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Leaf node that receives a gradient.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, true, Op::Leaf)
    }

    /// Leaf node excluded from differentiation.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, false, Op::Leaf)
    }

    /// Binds a stored parameter (once per graph); frozen parameters, and
    /// every parameter of an inference graph, enter as constants.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let p = store.get(id);
        let trainable = p.trainable && self.grad_enabled;
        let v = self.push(p.value.clone(), trainable, Op::Leaf);
        if trainable {
            self.params.push((id, v));
        }
        self.bound.insert(id, v);
        v
    }

    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(x).map(f);
        let rg = self.rg(x);
        self.push(value, rg, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        check_same(name, ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, rg, op))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, |v| v * s, Op::Scale(x, s))
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, |v| v + s, Op::AddScalar(x))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, gelu, Op::Gelu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn log_sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, log_sigmoid, Op::LogSigmoid(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, f64::abs, Op::Abs(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square(x))
    }

    /// Adds `b: [d]` to every row of `a: [.., d]`.
    pub fn add_row_bias(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let d = tb.numel();
        if tb.rank() != 1 || ta.shape().last() != Some(&d) {
            return shape_err("add_row_bias", ta.shape(), tb.shape());
        }
        let mut value = ta.clone();
        for row in value.data_mut().chunks_mut(d) {
            for (v, bias) in row.iter_mut().zip(tb.data()) {
                *v += bias;
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, rg, Op::AddRowBias(a, b)))
    }

    /// Adds `b: [C]` to every channel of `a: [C, ..]`.
    pub fn add_channel_bias(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if tb.rank() != 1 || ta.rank() == 0 || ta.dim(0) != tb.numel() {
            return shape_err("add_channel_bias", ta.shape(), tb.shape());
        }
        let per = ta.numel() / tb.numel();
        let mut value = ta.clone();
        for (chunk, bias) in value.data_mut().chunks_mut(per).zip(tb.data()) {
            chunk.iter_mut().for_each(|v| *v += bias);
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, rg, Op::AddChannelBias(a, b)))
    }

    /// `a [m, k] · b [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a [m, k] · bᵀ` with `b [n, k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = rank2("matmul", ta)?;
        let (b0, b1) = rank2("matmul", tb)?;
        let (kb, n) = if trans_b { (b1, b0) } else { (b0, b1) };
        if k != kb {
            return shape_err("matmul", ta.shape(), tb.shape());
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), false, tb.data(), trans_b, &mut out, 0.0);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, rg, Op::MatMul { a, b, trans_b }))
    }

    /// `x [n, in] · w [in, out] + b [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_row_bias(y, b),
            None => Ok(y),
        }
    }

    /// 2-D convolution of a single `[C, H, W]` map with `w [O, C, k, k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        let (c, h, wd) = rank3("conv2d", tx)?;
        if tw.rank() != 4 || tw.dim(1) != c || tw.dim(2) != tw.dim(3) {
            return shape_err("conv2d", tx.shape(), tw.shape());
        }
        let (o, k) = (tw.dim(0), tw.dim(2));
        if stride == 0 || h + 2 * pad < k || wd + 2 * pad < k {
            return Err(TensorError::InvalidArgument {
                op: "conv2d",
                msg: format!("kernel {k} stride {stride} pad {pad} does not fit input {:?}", tx.shape()),
            });
        }
        let geom = ConvGeom {
            c,
            h,
            w: wd,
            o,
            k,
            stride,
            pad,
            ho: (h + 2 * pad - k) / stride + 1,
            wo: (wd + 2 * pad - k) / stride + 1,
        };
        let cols = im2col(tx.data(), &geom);
        let n = geom.ho * geom.wo;
        let mut out = vec![0.0; o * n];
        gemm(o, c * k * k, n, tw.data(), false, &cols, false, &mut out, 0.0);
        let mut rg = self.rg(x) || self.rg(w);
        if let Some(b) = b {
            let tb = self.value(b);
            if tb.shape() != [o] {
                return shape_err("conv2d bias", &[o], tb.shape());
            }
            for (chunk, bias) in out.chunks_mut(n).zip(tb.data()) {
                chunk.iter_mut().for_each(|v| *v += bias);
            }
            rg |= self.rg(b);
        }
        let value = Tensor::new(vec![o, geom.ho, geom.wo], out)?;
        Ok(self.push(value, rg, Op::Conv2d { x, w, b, geom }))
    }

    /// Normalizes each row of `x [.., d]`, then applies `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let tx = self.value(x);
        let d = *tx.shape().last().unwrap_or(&0);
        let (tg, tb) = (self.value(gamma), self.value(beta));
        if d == 0 || tg.shape() != [d] || tb.shape() != [d] {
            return shape_err("layer_norm", tx.shape(), tg.shape());
        }
        let (xhat, rstd) = normalize_groups(tx.data(), d, eps);
        let mut out = xhat.clone();
        for row in out.chunks_mut(d) {
            for ((v, g), b) in row.iter_mut().zip(tg.data()).zip(tb.data()) {
                *v = *v * g + b;
            }
        }
        let value = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(value, rg, Op::LayerNorm { x, gamma, beta, xhat, rstd }))
    }

    /// Group normalization of a `[C, H, W]` map with per-channel affine.
    pub fn group_norm(&mut self, x: Var, groups: usize, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let tx = self.value(x);
        let (c, h, w) = rank3("group_norm", tx)?;
        let (tg, tb) = (self.value(gamma), self.value(beta));
        if groups == 0 || c % groups != 0 || tg.shape() != [c] || tb.shape() != [c] {
            return shape_err("group_norm", tx.shape(), tg.shape());
        }
        let hw = h * w;
        let (xhat, rstd) = normalize_groups(tx.data(), (c / groups) * hw, eps);
        let mut out = xhat.clone();
        for (ch, chunk) in out.chunks_mut(hw).enumerate() {
            let (g, b) = (tg.data()[ch], tb.data()[ch]);
            chunk.iter_mut().for_each(|v| *v = *v * g + b);
        }
        let value = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(value, rg, Op::GroupNorm { x, gamma, beta, groups, xhat, rstd }))
    }

    /// Softmax over the last axis, computed with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let d = *tx.shape().last().ok_or(TensorError::InvalidArgument {
            op: "softmax",
            msg: "scalar input".into(),
        })?;
        let mut out = tx.clone();
        for row in out.data_mut().chunks_mut(d) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        let rg = self.rg(x);
        Ok(self.push(out, rg, Op::Softmax(x)))
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let d = *tx.shape().last().ok_or(TensorError::InvalidArgument {
            op: "log_softmax",
            msg: "scalar input".into(),
        })?;
        let mut out = tx.clone();
        for row in out.data_mut().chunks_mut(d) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let rg = self.rg(x);
        Ok(self.push(out, rg, Op::LogSoftmax(x)))
    }

    /// `softmax(scale * x)` over rows of `x [n, m]`, restricted to the
    /// allowed entries of `mask`. Disallowed entries are exactly zero.
    pub fn masked_softmax(&mut self, x: Var, mask: &Arc<Mask>, scale: f64) -> Result<Var> {
        let tx = self.value(x);
        let (n, m) = rank2("masked_softmax", tx)?;
        if mask.rows != n || mask.cols != m {
            return shape_err("masked_softmax", tx.shape(), &[mask.rows, mask.cols]);
        }
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let src = &tx.data()[i * m..(i + 1) * m];
            let allow = &mask.allowed[i * m..(i + 1) * m];
            let dst = &mut out[i * m..(i + 1) * m];
            let mx = src
                .iter()
                .zip(allow)
                .filter(|(_, &a)| a)
                .map(|(&v, _)| v * scale)
                .fold(f64::NEG_INFINITY, f64::max);
            if mx == f64::NEG_INFINITY {
                return Err(TensorError::InvalidArgument {
                    op: "masked_softmax",
                    msg: format!("row {i} has no allowed entries"),
                });
            }
            let mut s = 0.0;
            for ((d, &v), &a) in dst.iter_mut().zip(src).zip(allow) {
                if a {
                    *d = (v * scale - mx).exp();
                    s += *d;
                }
            }
            dst.iter_mut().for_each(|d| *d /= s);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![n, m], out)?, rg, Op::MaskedSoftmax { x, scale }))
    }

    /// Rows of `table [K, d]` selected by `idx`, giving `[idx.len(), d]`.
    pub fn embed(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        let (k, d) = rank2("embed", tt)?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= k) {
            return Err(TensorError::InvalidArgument {
                op: "embed",
                msg: format!("index {bad} out of range for table of {k} rows"),
            });
        }
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            out.extend_from_slice(tt.row(i));
        }
        let rg = self.rg(table);
        Ok(self.push(Tensor::new(vec![idx.len(), d], out)?, rg, Op::Embed { table, idx: idx.to_vec() }))
    }

    /// `out[i] = x[i, idx[i]]` for `x [n, K]`.
    pub fn gather(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        let (n, k) = rank2("gather", tx)?;
        if idx.len() != n {
            return shape_err("gather", tx.shape(), &[idx.len()]);
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= k) {
            return Err(TensorError::InvalidArgument {
                op: "gather",
                msg: format!("index {bad} out of range for {k} classes"),
            });
        }
        let out = idx.iter().enumerate().map(|(r, &i)| tx.data()[r * k + i]).collect();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![n], out)?, rg, Op::Gather { x, idx: idx.to_vec() }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape.to_vec())?;
        let rg = self.rg(x);
        Ok(self.push(value, rg, Op::Reshape(x)))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).transpose()?;
        let rg = self.rg(x);
        Ok(self.push(value, rg, Op::Transpose(x)))
    }

    /// `[C, H, W]` map to `[H*W, C]` token rows.
    pub fn map_to_tokens(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = rank3("map_to_tokens", self.value(x))?;
        let flat = self.reshape(x, &[c, h * w])?;
        self.transpose(flat)
    }

    /// `[H*W, C]` token rows back to a `[C, H, W]` map.
    pub fn tokens_to_map(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let (n, c) = rank2("tokens_to_map", self.value(x))?;
        if n != h * w {
            return shape_err("tokens_to_map", &[n, c], &[h, w]);
        }
        let t = self.transpose(x)?;
        self.reshape(t, &[c, h, w])
    }

    /// Rows `start..end` along the first axis.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let tx = self.value(x);
        if tx.rank() == 0 || start > end || end > tx.dim(0) {
            return Err(TensorError::InvalidArgument {
                op: "slice_rows",
                msg: format!("range {start}..{end} invalid for {:?}", tx.shape()),
            });
        }
        let per = tx.numel() / tx.dim(0).max(1);
        let mut shape = tx.shape().to_vec();
        shape[0] = end - start;
        let value = Tensor::new(shape, tx.data()[start * per..end * per].to_vec())?;
        let rg = self.rg(x);
        Ok(self.push(value, rg, Op::SliceRows { x, start }))
    }

    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let first = self.value(*xs.first().ok_or(TensorError::InvalidArgument {
            op: "concat_rows",
            msg: "empty input".into(),
        })?);
        let tail: Vec<usize> = first.shape()[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &v in xs {
            let t = self.value(v);
            if t.rank() == 0 || t.shape()[1..] != tail[..] {
                return shape_err("concat_rows", first.shape(), t.shape());
            }
            rows += t.dim(0);
            data.extend_from_slice(t.data());
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        let rg = xs.iter().any(|&v| self.rg(v));
        Ok(self.push(Tensor::new(shape, data)?, rg, Op::ConcatRows(xs.to_vec())))
    }

    /// Columns `start..end` of `x [n, m]`.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let tx = self.value(x);
        let (n, m) = rank2("slice_cols", tx)?;
        if start > end || end > m {
            return Err(TensorError::InvalidArgument {
                op: "slice_cols",
                msg: format!("range {start}..{end} invalid for {:?}", tx.shape()),
            });
        }
        let w = end - start;
        let mut out = Vec::with_capacity(n * w);
        for r in 0..n {
            out.extend_from_slice(&tx.data()[r * m + start..r * m + end]);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![n, w], out)?, rg, Op::SliceCols { x, start }))
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let n = match xs.first() {
            Some(&v) => rank2("concat_cols", self.value(v))?.0,
            None => {
                return Err(TensorError::InvalidArgument {
                    op: "concat_cols",
                    msg: "empty input".into(),
                })
            }
        };
        let mut widths = Vec::with_capacity(xs.len());
        for &v in xs {
            let (r, c) = rank2("concat_cols", self.value(v))?;
            if r != n {
                return shape_err("concat_cols", &[n], &[r, c]);
            }
            widths.push(c);
        }
        let m: usize = widths.iter().sum();
        let mut out = vec![0.0; n * m];
        let mut off = 0;
        for (&v, &w) in xs.iter().zip(&widths) {
            let t = self.value(v).data();
            for r in 0..n {
                out[r * m + off..r * m + off + w].copy_from_slice(&t[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let rg = xs.iter().any(|&v| self.rg(v));
        Ok(self.push(Tensor::new(vec![n, m], out)?, rg, Op::ConcatCols(xs.to_vec())))
    }

    /// Differentiable resize of a `[C, H, W]` map.
    pub fn interpolate(&mut self, x: Var, h: usize, w: usize, mode: ResampleMode) -> Result<Var> {
        let tx = self.value(x);
        let (c, hi, wi) = rank3("interpolate", tx)?;
        if h == 0 || w == 0 {
            return Err(TensorError::InvalidArgument {
                op: "interpolate",
                msg: format!("target extents must be >= 1, got {h}x{w}"),
            });
        }
        let plan = ResamplePlan::new((hi, wi), (h, w), mode);
        let value = Tensor::new(vec![c, h, w], plan.forward(tx.data(), c))?;
        let rg = self.rg(x);
        Ok(self.push(value, rg, Op::Interpolate { x, plan }))
    }

    /// Rearranges `[C*r*r, H, W]` into `[C, H*r, W*r]`.
    pub fn depth_to_space(&mut self, x: Var, r: usize) -> Result<Var> {
        let tx = self.value(x);
        let (cr, h, w) = rank3("depth_to_space", tx)?;
        if r == 0 || cr % (r * r) != 0 {
            return Err(TensorError::InvalidArgument {
                op: "depth_to_space",
                msg: format!("{cr} channels not divisible by {}", r * r),
            });
        }
        let c = cr / (r * r);
        let mut out = vec![0.0; tx.numel()];
        for_each_d2s(c, h, w, r, |src, dst| out[dst] = tx.data()[src]);
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![c, h * r, w * r], out)?, rg, Op::DepthToSpace { x, r }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), rg, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let s = self.value(x).mean();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), rg, Op::Mean(x))
    }

    /// Mean squared difference.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.square(d);
        Ok(self.mean(sq))
    }

    /// Forward value of `r`; the gradient flows to `z` unchanged and never
    /// to `r`.
    pub fn straight_through(&mut self, z: Var, r: Var) -> Result<Var> {
        check_same("straight_through", self.value(z), self.value(r))?;
        let value = self.value(r).clone();
        let rg = self.rg(z);
        Ok(self.push(value, rg, Op::StraightThrough(z)))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(TensorError::EmptyTape);
        }
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(TensorError::NotScalar(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let out = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| g.map(|g| Tensor::new(self.nodes[i].value.shape().to_vec(), g).expect("grad shape")))
            .collect();
        Ok(Gradients {
            grads: out,
            params: self.params.clone(),
        })
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(g),
        }
    }

    fn acc_with(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce() -> Vec<f64>) {
        if self.rg(v) {
            let g = f();
            self.acc(grads, v, g);
        }
    }

    fn backward_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc_with(grads, *a, || g.to_vec());
                self.acc_with(grads, *b, || g.to_vec());
            }
            Op::Sub(a, b) => {
                self.acc_with(grads, *a, || g.to_vec());
                self.acc_with(grads, *b, || g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a).data(), self.value(*b).data());
                self.acc_with(grads, *a, || g.iter().zip(tb).map(|(x, y)| x * y).collect());
                self.acc_with(grads, *b, || g.iter().zip(ta).map(|(x, y)| x * y).collect());
            }
            Op::Scale(x, s) => self.acc_with(grads, *x, || g.iter().map(|v| v * s).collect()),
            Op::AddScalar(x) | Op::Reshape(x) | Op::StraightThrough(x) => {
                self.acc_with(grads, *x, || g.to_vec())
            }
            Op::AddRowBias(a, b) => {
                self.acc_with(grads, *a, || g.to_vec());
                self.acc_with(grads, *b, || {
                    let d = self.value(*b).numel();
                    let mut db = vec![0.0; d];
                    for row in g.chunks(d) {
                        db.iter_mut().zip(row).for_each(|(a, r)| *a += r);
                    }
                    db
                });
            }
            Op::AddChannelBias(a, b) => {
                self.acc_with(grads, *a, || g.to_vec());
                self.acc_with(grads, *b, || {
                    let c = self.value(*b).numel();
                    g.chunks(g.len() / c).map(|ch| ch.iter().sum()).collect()
                });
            }
            Op::MatMul { a, b, trans_b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = (ta.dim(0), ta.dim(1));
                let n = node.value.dim(1);
                self.acc_with(grads, *a, || {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g, false, tb.data(), !trans_b, &mut da, 0.0);
                    da
                });
                self.acc_with(grads, *b, || {
                    let mut db = vec![0.0; k * n];
                    if *trans_b {
                        gemm(n, m, k, g, true, ta.data(), false, &mut db, 0.0);
                    } else {
                        gemm(k, m, n, ta.data(), true, g, false, &mut db, 0.0);
                    }
                    db
                });
            }
            Op::Conv2d { x, w, b, geom } => {
                let n = geom.ho * geom.wo;
                let ckk = geom.c * geom.k * geom.k;
                if let Some(b) = b {
                    self.acc_with(grads, *b, || g.chunks(n).map(|ch| ch.iter().sum()).collect());
                }
                self.acc_with(grads, *w, || {
                    let cols = im2col(self.value(*x).data(), geom);
                    let mut dw = vec![0.0; geom.o * ckk];
                    gemm(geom.o, n, ckk, g, false, &cols, true, &mut dw, 0.0);
                    dw
                });
                self.acc_with(grads, *x, || {
                    let mut dcols = vec![0.0; ckk * n];
                    gemm(ckk, geom.o, n, self.value(*w).data(), true, g, false, &mut dcols, 0.0);
                    col2im(&dcols, geom)
                });
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let tg = self.value(*gamma).data();
                let d = tg.len();
                self.acc_with(grads, *beta, || {
                    let mut db = vec![0.0; d];
                    for row in g.chunks(d) {
                        db.iter_mut().zip(row).for_each(|(a, r)| *a += r);
                    }
                    db
                });
                self.acc_with(grads, *gamma, || {
                    let mut dg = vec![0.0; d];
                    for (row, xr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for ((a, r), xh) in dg.iter_mut().zip(row).zip(xr) {
                            *a += r * xh;
                        }
                    }
                    dg
                });
                self.acc_with(grads, *x, || {
                    let mut dxhat = g.to_vec();
                    for row in dxhat.chunks_mut(d) {
                        row.iter_mut().zip(tg).for_each(|(a, gm)| *a *= gm);
                    }
                    normalize_backward(&dxhat, xhat, rstd, d)
                });
            }
            Op::GroupNorm { x, gamma, beta, groups, xhat, rstd } => {
                let tg = self.value(*gamma).data();
                let c = tg.len();
                let hw = g.len() / c;
                self.acc_with(grads, *beta, || g.chunks(hw).map(|ch| ch.iter().sum()).collect());
                self.acc_with(grads, *gamma, || {
                    g.chunks(hw)
                        .zip(xhat.chunks(hw))
                        .map(|(a, b)| a.iter().zip(b).map(|(p, q)| p * q).sum())
                        .collect()
                });
                self.acc_with(grads, *x, || {
                    let mut dxhat = g.to_vec();
                    for (ch, chunk) in dxhat.chunks_mut(hw).enumerate() {
                        chunk.iter_mut().for_each(|v| *v *= tg[ch]);
                    }
                    normalize_backward(&dxhat, xhat, rstd, (c / groups) * hw)
                });
            }
            Op::Softmax(x) => {
                let d = *node.value.shape().last().unwrap();
                self.acc_with(grads, *x, || softmax_backward(y, g, d, 1.0));
            }
            // Disallowed entries have zero output, hence zero gradient.
            Op::MaskedSoftmax { x, scale } => {
                let d = node.value.dim(1);
                self.acc_with(grads, *x, || softmax_backward(y, g, d, *scale));
            }
            Op::LogSoftmax(x) => {
                let d = *node.value.shape().last().unwrap();
                self.acc_with(grads, *x, || {
                    let mut dx = vec![0.0; g.len()];
                    for ((out, gr), yr) in dx.chunks_mut(d).zip(g.chunks(d)).zip(y.chunks(d)) {
                        let s: f64 = gr.iter().sum();
                        for ((o, gv), yv) in out.iter_mut().zip(gr).zip(yr) {
                            *o = gv - yv.exp() * s;
                        }
                    }
                    dx
                });
            }
            Op::Gelu(x) => {
                let tx = self.value(*x).data();
                self.acc_with(grads, *x, || g.iter().zip(tx).map(|(gv, &xv)| gv * gelu_grad(xv)).collect());
            }
            Op::Sigmoid(x) => {
                self.acc_with(grads, *x, || g.iter().zip(y).map(|(gv, s)| gv * s * (1.0 - s)).collect());
            }
            Op::LogSigmoid(x) => {
                let tx = self.value(*x).data();
                self.acc_with(grads, *x, || g.iter().zip(tx).map(|(gv, &xv)| gv * sigmoid(-xv)).collect());
            }
            Op::Abs(x) => {
                let tx = self.value(*x).data();
                self.acc_with(grads, *x, || {
                    g.iter()
                        .zip(tx)
                        .map(|(gv, &xv)| if xv > 0.0 { *gv } else if xv < 0.0 { -gv } else { 0.0 })
                        .collect()
                });
            }
            Op::Square(x) => {
                let tx = self.value(*x).data();
                self.acc_with(grads, *x, || g.iter().zip(tx).map(|(gv, xv)| 2.0 * gv * xv).collect());
            }
            Op::Embed { table, idx } => {
                self.acc_with(grads, *table, || {
                    let tt = self.value(*table);
                    let d = tt.dim(1);
                    let mut dt = vec![0.0; tt.numel()];
                    for (r, &k) in idx.iter().enumerate() {
                        dt[k * d..(k + 1) * d]
                            .iter_mut()
                            .zip(&g[r * d..(r + 1) * d])
                            .for_each(|(a, b)| *a += b);
                    }
                    dt
                });
            }
            Op::Gather { x, idx } => {
                self.acc_with(grads, *x, || {
                    let tx = self.value(*x);
                    let k = tx.dim(1);
                    let mut dx = vec![0.0; tx.numel()];
                    for (r, &c) in idx.iter().enumerate() {
                        dx[r * k + c] += g[r];
                    }
                    dx
                });
            }
            Op::Transpose(x) => {
                self.acc_with(grads, *x, || {
                    let (m, n) = (node.value.dim(0), node.value.dim(1));
                    Tensor::new(vec![m, n], g.to_vec())
                        .and_then(|t| t.transpose())
                        .expect("transpose grad")
                        .into_data()
                });
            }
            Op::SliceRows { x, start } => {
                self.acc_with(grads, *x, || {
                    let tx = self.value(*x);
                    let per = tx.numel() / tx.dim(0).max(1);
                    let mut dx = vec![0.0; tx.numel()];
                    dx[start * per..start * per + g.len()].copy_from_slice(g);
                    dx
                });
            }
            Op::ConcatRows(xs) => {
                let mut off = 0;
                for &v in xs {
                    let len = self.value(v).numel();
                    self.acc_with(grads, v, || g[off..off + len].to_vec());
                    off += len;
                }
            }
            Op::SliceCols { x, start } => {
                self.acc_with(grads, *x, || {
                    let tx = self.value(*x);
                    let (n, m) = (tx.dim(0), tx.dim(1));
                    let w = node.value.dim(1);
                    let mut dx = vec![0.0; n * m];
                    for r in 0..n {
                        dx[r * m + start..r * m + start + w].copy_from_slice(&g[r * w..(r + 1) * w]);
                    }
                    dx
                });
            }
            Op::ConcatCols(xs) => {
                let (n, m) = (node.value.dim(0), node.value.dim(1));
                let mut off = 0;
                for &v in xs {
                    let w = self.value(v).dim(1);
                    self.acc_with(grads, v, || {
                        let mut out = Vec::with_capacity(n * w);
                        for r in 0..n {
                            out.extend_from_slice(&g[r * m + off..r * m + off + w]);
                        }
                        out
                    });
                    off += w;
                }
            }
            Op::Interpolate { x, plan } => {
                let c = node.value.dim(0);
                self.acc_with(grads, *x, || plan.adjoint(g, c));
            }
            Op::DepthToSpace { x, r } => {
                let (c, ho, wo) = (node.value.dim(0), node.value.dim(1), node.value.dim(2));
                self.acc_with(grads, *x, || {
                    let mut dx = vec![0.0; g.len()];
                    for_each_d2s(c, ho / r, wo / r, *r, |src, dst| dx[src] = g[dst]);
                    dx
                });
            }
            Op::Sum(x) => {
                let n = self.value(*x).numel();
                self.acc_with(grads, *x, || vec![g[0]; n]);
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                self.acc_with(grads, *x, || vec![g[0] / n as f64; n]);
            }
        }
    }
}

fn softmax_backward(y: &[f64], g: &[f64], d: usize, scale: f64) -> Vec<f64> {
    let mut dx = vec![0.0; g.len()];
    for ((out, gr), yr) in dx.chunks_mut(d).zip(g.chunks(d)).zip(y.chunks(d)) {
        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
        for ((o, gv), yv) in out.iter_mut().zip(gr).zip(yr) {
            *o = scale * yv * (gv - dot);
        }
    }
    dx
}

/// Calls `f(src, dst)` for every element moved by depth-to-space, where the
/// input is `[c*r*r, h, w]` and the output `[c, h*r, w*r]`.
fn for_each_d2s(c: usize, h: usize, w: usize, r: usize, mut f: impl FnMut(usize, usize)) {
    let (ho, wo) = (h * r, w * r);
    for ch in 0..c {
        for dy in 0..r {
            for dx in 0..r {
                let plane = ch * r * r + dy * r + dx;
                for y in 0..h {
                    for x in 0..w {
                        f((plane * h + y) * w + x, (ch * ho + y * r + dy) * wo + x * r + dx);
                    }
                }
            }
        }
    }
}
