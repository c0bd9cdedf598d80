//! Reverse-mode automatic differentiation on a flat tape.
//!
//! A [`Graph`] records every operation applied to its [`Var`] handles in
//! creation order, which is already a topological order, so the backward
//! pass is a single reverse sweep that visits each node exactly once.
//! Gradients of a value used by several consumers accumulate by summation.
//!
//! Parameters enter a graph as gradient leaves ([`Graph::leaf`]); everything
//! else (inputs, targets) enters as constants. After [`Graph::backward`],
//! each leaf's tensor holds d(loss)/d(leaf) in its grad accumulator.

use crate::error::{Error, Result};
use crate::tensor::{rows_cols, Tensor};

/// Handle to a node in one specific [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Matmul(Var, Var),
    AddRow(Var, Var),
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    Abs(Var),
    SoftmaxRows(Var),
    LayerNormRows {
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
        /// Per-channel statistics used in the forward pass. In training mode
        /// these are the batch statistics (and backward differentiates
        /// through them); in eval mode they are frozen running averages.
        mean: Vec<f64>,
        var: Vec<f64>,
        stats_from_batch: bool,
    },
    Conv3x3 {
        x: Var,
        w: Var,
        b: Var,
    },
    Reshape(Var),
    Transpose(Var),
    Sum(Var),
    Mean(Var),
    FrobNorm(Var),
    Stack(Vec<Var>),
    ExtractPatches {
        x: Var,
        patch: usize,
    },
    TilePatches {
        x: Var,
        patch: usize,
        channels: usize,
        h: usize,
        w: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
}

struct Node {
    tensor: Tensor,
    op: Op,
    needs_grad: bool,
}

pub struct Graph {
    nodes: Vec<Node>,
    check_finite: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            check_finite: true,
        }
    }

    /// Toggle NaN/Inf detection after each forward op (on by default).
    pub fn with_finite_checks(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Insert a constant (no gradient).
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_node(t, Op::Leaf, false)
    }

    /// Insert a gradient leaf (a parameter). Its grad accumulator survives
    /// across repeated backward calls without reset.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let t = if t.requires_grad() { t } else { t.with_grad() };
        self.push_node(t, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].tensor
    }

    /// Gradient accumulated on a leaf after backward.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].tensor.grad()
    }

    /// Batch statistics recorded by a training-mode batch-norm node.
    pub fn bn_batch_stats(&self, v: Var) -> Option<(&[f64], &[f64])> {
        match &self.nodes[v.0].op {
            Op::BatchNorm {
                mean,
                var,
                stats_from_batch: true,
                ..
            } => Some((mean, var)),
            _ => None,
        }
    }

    fn push_node(&mut self, tensor: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            tensor,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, op_name: &'static str, shape: &[usize], data: Vec<f64>, op: Op) -> Result<Var> {
        if self.check_finite {
            if let Some(index) = data.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite { op: op_name, index });
            }
        }
        let needs_grad = self.op_inputs(&op).iter().any(|v| self.nodes[v.0].needs_grad);
        let tensor = Tensor::new(shape, data)?;
        Ok(self.push_node(tensor, op, needs_grad))
    }

    fn op_inputs(&self, op: &Op) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Matmul(a, b) | Op::AddRow(a, b) => {
                vec![*a, *b]
            }
            Op::Scale(a, _)
            | Op::Relu(a)
            | Op::Gelu(a)
            | Op::Sigmoid(a)
            | Op::Abs(a)
            | Op::SoftmaxRows(a)
            | Op::Reshape(a)
            | Op::Transpose(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::FrobNorm(a) => vec![*a],
            Op::LayerNormRows { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Conv3x3 { x, w, b } => vec![*x, *w, *b],
            Op::Stack(vs) | Op::ConcatCols(vs) => vs.clone(),
            Op::ExtractPatches { x, .. } | Op::TilePatches { x, .. } | Op::SliceCols { x, .. } => {
                vec![*x]
            }
        }
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let sa = self.value(a).shape();
        let sb = self.value(b).shape();
        if sa != sb {
            return Err(Error::Dimension(format!(
                "{what}: shapes {sa:?} and {sb:?} differ"
            )));
        }
        Ok(())
    }

    // ── Elementwise and scalar ops ─────────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x + y);
        let shape = self.value(a).shape().to_vec();
        self.push_op("add", &shape, data, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x - y);
        let shape = self.value(a).shape().to_vec();
        self.push_op("sub", &shape, data, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x * y);
        let shape = self.value(a).shape().to_vec();
        self.push_op("mul", &shape, data, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let data = self.value(a).data().iter().map(|x| x * c).collect();
        let shape = self.value(a).shape().to_vec();
        self.push_op("scale", &shape, data, Op::Scale(a, c))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let data = self.value(a).data().iter().map(|&x| x.max(0.0)).collect();
        let shape = self.value(a).shape().to_vec();
        self.push_op("relu", &shape, data, Op::Relu(a))
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let data = self.value(a).data().iter().map(|&x| gelu_val(x)).collect();
        let shape = self.value(a).shape().to_vec();
        self.push_op("gelu", &shape, data, Op::Gelu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let data = self
            .value(a)
            .data()
            .iter()
            .map(|&x| 1.0 / (1.0 + (-x).exp()))
            .collect();
        let shape = self.value(a).shape().to_vec();
        self.push_op("sigmoid", &shape, data, Op::Sigmoid(a))
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        let data = self.value(a).data().iter().map(|x| x.abs()).collect();
        let shape = self.value(a).shape().to_vec();
        self.push_op("abs", &shape, data, Op::Abs(a))
    }

    // ── Linear algebra ─────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = rows_cols(self.value(a).shape())?;
        let (k2, n) = rows_cols(self.value(b).shape())?;
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul: inner extents {k} and {k2} differ"
            )));
        }
        let data = matmul_kernel(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push_op("matmul", &[m, n], data, Op::Matmul(a, b))
    }

    /// Broadcast-add a length-N row vector to every row of an M×N matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = rows_cols(self.value(a).shape())?;
        if self.value(row).shape() != [n] {
            return Err(Error::Dimension(format!(
                "add_row: row shape {:?} does not match {n} columns",
                self.value(row).shape()
            )));
        }
        let av = self.value(a).data();
        let rv = self.value(row).data();
        let mut data = av.to_vec();
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] += rv[j];
            }
        }
        self.push_op("add_row", &[m, n], data, Op::AddRow(a, row))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = rows_cols(self.value(a).shape())?;
        let av = self.value(a).data();
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = av[i * n + j];
            }
        }
        self.push_op("transpose", &[n, m], data, Op::Transpose(a))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.value(a).numel() {
            return Err(Error::Dimension(format!(
                "reshape: {:?} -> {:?} changes element count",
                self.value(a).shape(),
                shape
            )));
        }
        let data = self.value(a).data().to_vec();
        self.push_op("reshape", shape, data, Op::Reshape(a))
    }

    // ── Softmax / normalization ────────────────────────────────────────

    /// Row-wise softmax with per-row max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = rows_cols(self.value(a).shape())?;
        if n == 0 {
            return Err(Error::Dimension("softmax_rows: empty row dimension".into()));
        }
        let av = self.value(a).data();
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            let row = &av[i * n..(i + 1) * n];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..n {
                let e = (row[j] - mx).exp();
                data[i * n + j] = e;
                sum += e;
            }
            for j in 0..n {
                data[i * n + j] /= sum;
            }
        }
        self.push_op("softmax_rows", &[m, n], data, Op::SoftmaxRows(a))
    }

    /// Per-row layer normalization with learnable gamma/beta of length N.
    pub fn layer_norm_rows(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (m, n) = rows_cols(self.value(x).shape())?;
        if self.value(gamma).shape() != [n] || self.value(beta).shape() != [n] {
            return Err(Error::Dimension(format!(
                "layer_norm_rows: gamma/beta must have shape [{n}]"
            )));
        }
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            let row = &xv[i * n..(i + 1) * n];
            let mu = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..n {
                data[i * n + j] = gv[j] * (row[j] - mu) * inv + bv[j];
            }
        }
        self.push_op(
            "layer_norm_rows",
            &[m, n],
            data,
            Op::LayerNormRows { x, gamma, beta, eps },
        )
    }

    /// Batch normalization over a B×C×H×W tensor using batch statistics
    /// (training mode). Gradients flow through the statistics.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (b, c, h, w) = expect_rank4(self.value(x).shape())?;
        self.check_bn_params(gamma, beta, c)?;
        let xv = self.value(x).data();
        let m = (b * h * w) as f64;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ch in 0..c {
            let mut s = 0.0;
            for_each_bn_index(b, c, h, w, ch, |idx| s += xv[idx]);
            let mu = s / m;
            let mut v = 0.0;
            for_each_bn_index(b, c, h, w, ch, |idx| {
                let d = xv[idx] - mu;
                v += d * d;
            });
            mean[ch] = mu;
            var[ch] = v / m;
        }
        self.batch_norm_with_stats(x, gamma, beta, eps, mean, var, true)
    }

    /// Batch normalization using frozen running statistics (eval mode).
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let (_, c, _, _) = expect_rank4(self.value(x).shape())?;
        self.check_bn_params(gamma, beta, c)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::Dimension(format!(
                "batch_norm_eval: running stats must have length {c}"
            )));
        }
        self.batch_norm_with_stats(
            x,
            gamma,
            beta,
            eps,
            running_mean.to_vec(),
            running_var.to_vec(),
            false,
        )
    }

    fn check_bn_params(&self, gamma: Var, beta: Var, c: usize) -> Result<()> {
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(Error::Dimension(format!(
                "batch_norm: gamma/beta must have shape [{c}]"
            )));
        }
        Ok(())
    }

    fn batch_norm_with_stats(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
        mean: Vec<f64>,
        var: Vec<f64>,
        stats_from_batch: bool,
    ) -> Result<Var> {
        let (b, c, h, w) = expect_rank4(self.value(x).shape())?;
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut data = vec![0.0; xv.len()];
        for ch in 0..c {
            let inv = 1.0 / (var[ch] + eps).sqrt();
            for_each_bn_index(b, c, h, w, ch, |idx| {
                data[idx] = gv[ch] * (xv[idx] - mean[ch]) * inv + bv[ch];
            });
        }
        let shape = [b, c, h, w];
        self.push_op(
            "batch_norm",
            &shape,
            data,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                eps,
                mean,
                var,
                stats_from_batch,
            },
        )
    }

    // ── Convolution ────────────────────────────────────────────────────

    /// 3×3 cross-correlation, stride 1, zero padding 1 (same spatial size).
    /// x: B×C_in×H×W, w: C_out×C_in×3×3, bias: C_out.
    pub fn conv3x3(&mut self, x: Var, w: Var, bias: Var) -> Result<Var> {
        let (b, cin, h, w_) = expect_rank4(self.value(x).shape())?;
        let ws = self.value(w).shape();
        if ws.len() != 4 || ws[2] != 3 || ws[3] != 3 {
            return Err(Error::Dimension(format!(
                "conv3x3: weight shape {ws:?} is not C_out×C_in×3×3"
            )));
        }
        if ws[1] != cin {
            return Err(Error::Dimension(format!(
                "conv3x3: input has {cin} channels, weight expects {}",
                ws[1]
            )));
        }
        let cout = ws[0];
        if self.value(bias).shape() != [cout] {
            return Err(Error::Dimension(format!(
                "conv3x3: bias must have shape [{cout}]"
            )));
        }
        let data = conv3x3_forward(
            self.value(x).data(),
            self.value(w).data(),
            self.value(bias).data(),
            b,
            cin,
            cout,
            h,
            w_,
        );
        self.push_op("conv3x3", &[b, cout, h, w_], data, Op::Conv3x3 { x, w, b: bias })
    }

    // ── Reductions ─────────────────────────────────────────────────────

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.value(a).data().iter().sum();
        self.push_op("sum", &[], vec![s], Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel();
        if n == 0 {
            return Err(Error::Dimension("mean of an empty tensor".into()));
        }
        let s: f64 = self.value(a).data().iter().sum::<f64>() / n as f64;
        self.push_op("mean", &[], vec![s], Op::Mean(a))
    }

    /// Euclidean norm of the flattened tensor. The gradient at the origin is
    /// taken to be zero (the subgradient choice), so losses built from norms
    /// of coincident inputs stay finite.
    pub fn frob_norm(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.value(a).data().iter().map(|v| v * v).sum::<f64>().sqrt();
        self.push_op("frob_norm", &[], vec![s], Op::FrobNorm(a))
    }

    // ── Structure ops ──────────────────────────────────────────────────

    /// Stack same-shaped tensors along a new leading axis.
    pub fn stack(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Dimension("stack of zero tensors".into()));
        }
        let base = self.value(parts[0]).shape().to_vec();
        for &p in parts {
            if self.value(p).shape() != base.as_slice() {
                return Err(Error::Dimension(format!(
                    "stack: shape {:?} differs from {:?}",
                    self.value(p).shape(),
                    base
                )));
            }
        }
        let slab = self.value(parts[0]).numel();
        let mut data = Vec::with_capacity(slab * parts.len());
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(&base);
        self.push_op("stack", &shape, data, Op::Stack(parts.to_vec()))
    }

    /// Split a C×H×W map into non-overlapping patch rows: N×(C·p²), where
    /// N = (H/p)·(W/p) and columns are ordered channel-major within a patch.
    pub fn extract_patches(&mut self, x: Var, patch: usize) -> Result<Var> {
        let s = self.value(x).shape();
        if s.len() != 3 {
            return Err(Error::Dimension(format!(
                "extract_patches: expected C×H×W, got {s:?}"
            )));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        if patch == 0 || h % patch != 0 || w % patch != 0 {
            return Err(Error::Dimension(format!(
                "extract_patches: {h}×{w} not divisible by patch {patch}"
            )));
        }
        let (gh, gw) = (h / patch, w / patch);
        let n = gh * gw;
        let cols = c * patch * patch;
        let xv = self.value(x).data();
        let mut data = vec![0.0; n * cols];
        for py in 0..gh {
            for px in 0..gw {
                let tok = py * gw + px;
                for ch in 0..c {
                    for u in 0..patch {
                        for v in 0..patch {
                            let col = ch * patch * patch + u * patch + v;
                            data[tok * cols + col] =
                                xv[ch * h * w + (py * patch + u) * w + (px * patch + v)];
                        }
                    }
                }
            }
        }
        self.push_op("extract_patches", &[n, cols], data, Op::ExtractPatches { x, patch })
    }

    /// Inverse of [`Graph::extract_patches`] for `channels`-channel tiles:
    /// N×(channels·p²) token rows reassembled into channels×H×W.
    pub fn tile_patches(
        &mut self,
        x: Var,
        patch: usize,
        channels: usize,
        h: usize,
        w: usize,
    ) -> Result<Var> {
        let s = self.value(x).shape().to_vec();
        let (gh, gw) = (h / patch, w / patch);
        if patch == 0 || h % patch != 0 || w % patch != 0 {
            return Err(Error::Dimension(format!(
                "tile_patches: {h}×{w} not divisible by patch {patch}"
            )));
        }
        if s != [gh * gw, channels * patch * patch] {
            return Err(Error::Dimension(format!(
                "tile_patches: token shape {s:?} does not match {}×{}",
                gh * gw,
                channels * patch * patch
            )));
        }
        let cols = channels * patch * patch;
        let xv = self.value(x).data();
        let mut data = vec![0.0; channels * h * w];
        for py in 0..gh {
            for px in 0..gw {
                let tok = py * gw + px;
                for ch in 0..channels {
                    for u in 0..patch {
                        for v in 0..patch {
                            let col = ch * patch * patch + u * patch + v;
                            data[ch * h * w + (py * patch + u) * w + (px * patch + v)] =
                                xv[tok * cols + col];
                        }
                    }
                }
            }
        }
        self.push_op(
            "tile_patches",
            &[channels, h, w],
            data,
            Op::TilePatches {
                x,
                patch,
                channels,
                h,
                w,
            },
        )
    }

    /// Columns [start, start+len) of a 2-D tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = rows_cols(self.value(x).shape())?;
        if start + len > n {
            return Err(Error::Dimension(format!(
                "slice_cols: [{start}, {}) out of {n} columns",
                start + len
            )));
        }
        let xv = self.value(x).data();
        let mut data = vec![0.0; m * len];
        for i in 0..m {
            data[i * len..(i + 1) * len].copy_from_slice(&xv[i * n + start..i * n + start + len]);
        }
        self.push_op("slice_cols", &[m, len], data, Op::SliceCols { x, start })
    }

    /// Concatenate 2-D tensors with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Dimension("concat_cols of zero tensors".into()));
        }
        let (m, _) = rows_cols(self.value(parts[0]).shape())?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (mp, np) = rows_cols(self.value(p).shape())?;
            if mp != m {
                return Err(Error::Dimension(format!(
                    "concat_cols: row counts {m} and {mp} differ"
                )));
            }
            widths.push(np);
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; m * total];
        let mut offset = 0;
        for (&p, &np) in parts.iter().zip(&widths) {
            let pv = self.value(p).data();
            for i in 0..m {
                data[i * total + offset..i * total + offset + np]
                    .copy_from_slice(&pv[i * np..(i + 1) * np]);
            }
            offset += np;
        }
        self.push_op("concat_cols", &[m, total], data, Op::ConcatCols(parts.to_vec()))
    }

    // ── Backward ───────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Every `requires_grad` leaf ends up
    /// holding d(loss)/d(leaf); calling backward again without resetting
    /// accumulates into the same buffers.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::Internal("backward: var from another graph".into()));
        }
        if !self.nodes[loss.0].tensor.is_scalar() {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].tensor.shape()
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if grads[i].is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            for v in self.op_inputs(&self.nodes[i].op) {
                if v.0 >= i {
                    return Err(Error::Internal(
                        "cycle detected: op input does not precede its node".into(),
                    ));
                }
            }
            let g = grads[i].take().unwrap();
            self.propagate(i, &g, &mut grads)?;
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g); // keep leaf grads for the final write-back
            }
        }

        for i in 0..n {
            if let (true, Some(g)) = (self.nodes[i].tensor.requires_grad(), &grads[i]) {
                self.nodes[i].tensor.accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let acc = |grads: &mut [Option<Vec<f64>>], v: Var, delta: &[f64]| {
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; delta.len()]);
            for (s, d) in slot.iter_mut().zip(delta) {
                *s += d;
            }
        };
        // Skip propagation into constants.
        let wants = |this: &Self, v: Var| this.nodes[v.0].needs_grad;

        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if wants(self, *a) {
                    acc(grads, *a, g);
                }
                if wants(self, *b) {
                    acc(grads, *b, g);
                }
            }
            Op::Sub(a, b) => {
                if wants(self, *a) {
                    acc(grads, *a, g);
                }
                if wants(self, *b) {
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    acc(grads, *b, &neg);
                }
            }
            Op::Mul(a, b) => {
                if wants(self, *a) {
                    let d = zip_map(g, self.value(*b).data(), |x, y| x * y);
                    acc(grads, *a, &d);
                }
                if wants(self, *b) {
                    let d = zip_map(g, self.value(*a).data(), |x, y| x * y);
                    acc(grads, *b, &d);
                }
            }
            Op::Scale(a, c) => {
                if wants(self, *a) {
                    let d: Vec<f64> = g.iter().map(|v| v * c).collect();
                    acc(grads, *a, &d);
                }
            }
            Op::Matmul(a, b) => {
                let (m, k) = rows_cols(self.value(*a).shape())?;
                let n = self.value(*b).shape()[1];
                if wants(self, *a) {
                    // a.grad += g · bᵀ
                    let bt = transpose_kernel(self.value(*b).data(), k, n);
                    let d = matmul_kernel(g, &bt, m, n, k);
                    acc(grads, *a, &d);
                }
                if wants(self, *b) {
                    // b.grad += aᵀ · g
                    let at = transpose_kernel(self.value(*a).data(), m, k);
                    let d = matmul_kernel(&at, g, k, m, n);
                    acc(grads, *b, &d);
                }
            }
            Op::AddRow(a, row) => {
                if wants(self, *a) {
                    acc(grads, *a, g);
                }
                if wants(self, *row) {
                    let (m, n) = rows_cols(self.value(*a).shape())?;
                    let mut d = vec![0.0; n];
                    for i in 0..m {
                        for j in 0..n {
                            d[j] += g[i * n + j];
                        }
                    }
                    acc(grads, *row, &d);
                }
            }
            Op::Relu(a) => {
                if wants(self, *a) {
                    let d = zip_map(self.value(*a).data(), g, |x, gi| if x > 0.0 { gi } else { 0.0 });
                    acc(grads, *a, &d);
                }
            }
            Op::Gelu(a) => {
                if wants(self, *a) {
                    let d = zip_map(self.value(*a).data(), g, |x, gi| gi * gelu_grad(x));
                    acc(grads, *a, &d);
                }
            }
            Op::Sigmoid(a) => {
                if wants(self, *a) {
                    let d = zip_map(self.value(i_var(i)).data(), g, |s, gi| gi * s * (1.0 - s));
                    acc(grads, *a, &d);
                }
            }
            Op::Abs(a) => {
                if wants(self, *a) {
                    let d = zip_map(self.value(*a).data(), g, |x, gi| {
                        if x > 0.0 {
                            gi
                        } else if x < 0.0 {
                            -gi
                        } else {
                            0.0
                        }
                    });
                    acc(grads, *a, &d);
                }
            }
            Op::SoftmaxRows(a) => {
                if wants(self, *a) {
                    let (m, n) = rows_cols(self.value(*a).shape())?;
                    let s = self.value(i_var(i)).data();
                    let mut d = vec![0.0; m * n];
                    for r in 0..m {
                        let srow = &s[r * n..(r + 1) * n];
                        let grow = &g[r * n..(r + 1) * n];
                        let dot: f64 = srow.iter().zip(grow).map(|(x, y)| x * y).sum();
                        for j in 0..n {
                            d[r * n + j] = srow[j] * (grow[j] - dot);
                        }
                    }
                    acc(grads, *a, &d);
                }
            }
            Op::LayerNormRows { x, gamma, beta, eps } => {
                let (m, n) = rows_cols(self.value(*x).shape())?;
                let xv = self.value(*x).data();
                let gv = self.value(*gamma).data();
                let nf = n as f64;
                let mut dx = vec![0.0; m * n];
                let mut dgamma = vec![0.0; n];
                let mut dbeta = vec![0.0; n];
                for r in 0..m {
                    let row = &xv[r * n..(r + 1) * n];
                    let grow = &g[r * n..(r + 1) * n];
                    let mu = row.iter().sum::<f64>() / nf;
                    let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / nf;
                    let inv = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|v| (v - mu) * inv).collect();
                    let gh: Vec<f64> = grow.iter().zip(gv).map(|(gi, ga)| gi * ga).collect();
                    let mean_gh = gh.iter().sum::<f64>() / nf;
                    let mean_ghx = gh.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / nf;
                    for j in 0..n {
                        dx[r * n + j] = inv * (gh[j] - mean_gh - xhat[j] * mean_ghx);
                        dgamma[j] += grow[j] * xhat[j];
                        dbeta[j] += grow[j];
                    }
                }
                if wants(self, *x) {
                    acc(grads, *x, &dx);
                }
                if wants(self, *gamma) {
                    acc(grads, *gamma, &dgamma);
                }
                if wants(self, *beta) {
                    acc(grads, *beta, &dbeta);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                eps,
                mean,
                var,
                stats_from_batch,
            } => {
                let (b, c, h, w) = expect_rank4(self.value(*x).shape())?;
                let xv = self.value(*x).data();
                let gv = self.value(*gamma).data();
                let m = (b * h * w) as f64;
                let mut dx = vec![0.0; xv.len()];
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for ch in 0..c {
                    let inv = 1.0 / (var[ch] + eps).sqrt();
                    let mut sum_g = 0.0;
                    let mut sum_gx = 0.0;
                    for_each_bn_index(b, c, h, w, ch, |idx| {
                        let xhat = (xv[idx] - mean[ch]) * inv;
                        sum_g += g[idx];
                        sum_gx += g[idx] * xhat;
                    });
                    dgamma[ch] = sum_gx;
                    dbeta[ch] = sum_g;
                    if *stats_from_batch {
                        let mean_g = sum_g / m;
                        let mean_gx = sum_gx / m;
                        for_each_bn_index(b, c, h, w, ch, |idx| {
                            let xhat = (xv[idx] - mean[ch]) * inv;
                            dx[idx] = gv[ch] * inv * (g[idx] - mean_g - xhat * mean_gx);
                        });
                    } else {
                        for_each_bn_index(b, c, h, w, ch, |idx| {
                            dx[idx] = gv[ch] * inv * g[idx];
                        });
                    }
                }
                if wants(self, *x) {
                    acc(grads, *x, &dx);
                }
                if wants(self, *gamma) {
                    acc(grads, *gamma, &dgamma);
                }
                if wants(self, *beta) {
                    acc(grads, *beta, &dbeta);
                }
            }
            Op::Conv3x3 { x, w, b } => {
                let (bs, cin, h, ww) = expect_rank4(self.value(*x).shape())?;
                let cout = self.value(*w).shape()[0];
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                if wants(self, *x) {
                    let dx = conv3x3_backward_input(g, wv, bs, cin, cout, h, ww);
                    acc(grads, *x, &dx);
                }
                if wants(self, *w) {
                    let dw = conv3x3_backward_weight(g, xv, bs, cin, cout, h, ww);
                    acc(grads, *w, &dw);
                }
                if wants(self, *b) {
                    let mut db = vec![0.0; cout];
                    for n in 0..bs {
                        for co in 0..cout {
                            let base = (n * cout + co) * h * ww;
                            db[co] += g[base..base + h * ww].iter().sum::<f64>();
                        }
                    }
                    acc(grads, *b, &db);
                }
            }
            Op::Reshape(a) => {
                if wants(self, *a) {
                    acc(grads, *a, g);
                }
            }
            Op::Transpose(a) => {
                if wants(self, *a) {
                    let (m, n) = rows_cols(self.value(*a).shape())?;
                    // g has shape n×m; transpose back.
                    let d = transpose_kernel(g, n, m);
                    acc(grads, *a, &d);
                }
            }
            Op::Sum(a) => {
                if wants(self, *a) {
                    let d = vec![g[0]; self.value(*a).numel()];
                    acc(grads, *a, &d);
                }
            }
            Op::Mean(a) => {
                if wants(self, *a) {
                    let n = self.value(*a).numel() as f64;
                    let d = vec![g[0] / n; self.value(*a).numel()];
                    acc(grads, *a, &d);
                }
            }
            Op::FrobNorm(a) => {
                if wants(self, *a) {
                    let norm = self.value(i_var(i)).data()[0];
                    let d: Vec<f64> = if norm > 0.0 {
                        self.value(*a).data().iter().map(|x| g[0] * x / norm).collect()
                    } else {
                        vec![0.0; self.value(*a).numel()]
                    };
                    acc(grads, *a, &d);
                }
            }
            Op::Stack(parts) => {
                let slab = self.value(parts[0]).numel();
                for (k, &p) in parts.iter().enumerate() {
                    if wants(self, p) {
                        acc(grads, p, &g[k * slab..(k + 1) * slab]);
                    }
                }
            }
            Op::ExtractPatches { x, patch } => {
                if wants(self, *x) {
                    let s = self.value(*x).shape();
                    let (c, h, w) = (s[0], s[1], s[2]);
                    let (gh, gw) = (h / patch, w / patch);
                    let cols = c * patch * patch;
                    let mut d = vec![0.0; c * h * w];
                    for py in 0..gh {
                        for px in 0..gw {
                            let tok = py * gw + px;
                            for ch in 0..c {
                                for u in 0..*patch {
                                    for v in 0..*patch {
                                        let col = ch * patch * patch + u * patch + v;
                                        d[ch * h * w + (py * patch + u) * w + (px * patch + v)] +=
                                            g[tok * cols + col];
                                    }
                                }
                            }
                        }
                    }
                    acc(grads, *x, &d);
                }
            }
            Op::TilePatches {
                x,
                patch,
                channels,
                h,
                w,
            } => {
                if wants(self, *x) {
                    let (gh, gw) = (h / patch, w / patch);
                    let cols = channels * patch * patch;
                    let mut d = vec![0.0; gh * gw * cols];
                    for py in 0..gh {
                        for px in 0..gw {
                            let tok = py * gw + px;
                            for ch in 0..*channels {
                                for u in 0..*patch {
                                    for v in 0..*patch {
                                        let col = ch * patch * patch + u * patch + v;
                                        d[tok * cols + col] +=
                                            g[ch * h * w + (py * patch + u) * w + (px * patch + v)];
                                    }
                                }
                            }
                        }
                    }
                    acc(grads, *x, &d);
                }
            }
            Op::SliceCols { x, start } => {
                if wants(self, *x) {
                    let (m, n) = rows_cols(self.value(*x).shape())?;
                    let len = self.value(i_var(i)).shape()[1];
                    let mut d = vec![0.0; m * n];
                    for r in 0..m {
                        for j in 0..len {
                            d[r * n + start + j] += g[r * len + j];
                        }
                    }
                    acc(grads, *x, &d);
                }
            }
            Op::ConcatCols(parts) => {
                let m = self.value(parts[0]).shape()[0];
                let total = self.value(i_var(i)).shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let np = self.value(p).shape()[1];
                    if wants(self, p) {
                        let mut d = vec![0.0; m * np];
                        for r in 0..m {
                            d[r * np..(r + 1) * np]
                                .copy_from_slice(&g[r * total + offset..r * total + offset + np]);
                        }
                        acc(grads, p, &d);
                    }
                    offset += np;
                }
            }
        }
        Ok(())
    }
}

#[inline]
fn i_var(i: usize) -> Var {
    Var(i)
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn gelu_val(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub(crate) fn matmul_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

fn transpose_kernel(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

fn expect_rank4(shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    if shape.len() != 4 {
        return Err(Error::Dimension(format!(
            "expected a B×C×H×W tensor, got shape {shape:?}"
        )));
    }
    Ok((shape[0], shape[1], shape[2], shape[3]))
}

#[inline]
fn for_each_bn_index(b: usize, c: usize, h: usize, w: usize, ch: usize, mut f: impl FnMut(usize)) {
    for n in 0..b {
        let base = (n * c + ch) * h * w;
        for i in 0..h * w {
            f(base + i);
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv3x3_forward(
    x: &[f64],
    w: &[f64],
    bias: &[f64],
    b: usize,
    cin: usize,
    cout: usize,
    h: usize,
    ww: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; b * cout * h * ww];
    for n in 0..b {
        for co in 0..cout {
            let obase = (n * cout + co) * h * ww;
            out[obase..obase + h * ww].iter_mut().for_each(|v| *v = bias[co]);
            for ci in 0..cin {
                let xbase = (n * cin + ci) * h * ww;
                for u in 0..3usize {
                    for v in 0..3usize {
                        let wv = w[((co * cin + ci) * 3 + u) * 3 + v];
                        if wv == 0.0 {
                            continue;
                        }
                        // output row i reads input row i+u-1
                        let (i0, i1) = row_range(h, u);
                        for i in i0..i1 {
                            let xi = i + u - 1;
                            let (j0, j1) = row_range(ww, v);
                            let orow = obase + i * ww;
                            let xrow = xbase + xi * ww;
                            for j in j0..j1 {
                                out[orow + j] += wv * x[xrow + j + v - 1];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Valid output index range along one axis for kernel offset `k` in {0,1,2}
/// with zero padding 1: input index = output index + k − 1 must be in bounds.
#[inline]
fn row_range(extent: usize, k: usize) -> (usize, usize) {
    let lo = if k == 0 { 1 } else { 0 };
    let hi = if k == 2 { extent - 1 } else { extent };
    (lo, hi.max(lo))
}

fn conv3x3_backward_input(
    g: &[f64],
    w: &[f64],
    b: usize,
    cin: usize,
    cout: usize,
    h: usize,
    ww: usize,
) -> Vec<f64> {
    let mut dx = vec![0.0; b * cin * h * ww];
    for n in 0..b {
        for co in 0..cout {
            let gbase = (n * cout + co) * h * ww;
            for ci in 0..cin {
                let xbase = (n * cin + ci) * h * ww;
                for u in 0..3usize {
                    for v in 0..3usize {
                        let wv = w[((co * cin + ci) * 3 + u) * 3 + v];
                        if wv == 0.0 {
                            continue;
                        }
                        let (i0, i1) = row_range(h, u);
                        for i in i0..i1 {
                            let xi = i + u - 1;
                            let (j0, j1) = row_range(ww, v);
                            let grow = gbase + i * ww;
                            let xrow = xbase + xi * ww;
                            for j in j0..j1 {
                                dx[xrow + j + v - 1] += wv * g[grow + j];
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

fn conv3x3_backward_weight(
    g: &[f64],
    x: &[f64],
    b: usize,
    cin: usize,
    cout: usize,
    h: usize,
    ww: usize,
) -> Vec<f64> {
    let mut dw = vec![0.0; cout * cin * 9];
    for n in 0..b {
        for co in 0..cout {
            let gbase = (n * cout + co) * h * ww;
            for ci in 0..cin {
                let xbase = (n * cin + ci) * h * ww;
                for u in 0..3usize {
                    for v in 0..3usize {
                        let mut s = 0.0;
                        let (i0, i1) = row_range(h, u);
                        for i in i0..i1 {
                            let xi = i + u - 1;
                            let (j0, j1) = row_range(ww, v);
                            let grow = gbase + i * ww;
                            let xrow = xbase + xi * ww;
                            for j in j0..j1 {
                                s += g[grow + j] * x[xrow + j + v - 1];
                            }
                        }
                        dw[((co * cin + ci) * 3 + u) * 3 + v] += s;
                    }
                }
            }
        }
    }
    dw
}
