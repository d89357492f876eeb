use alloc::boxed::Box;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use super::kernels::{self, Conv1dGeom, Conv2dGeom, NormSaved};
use super::Tensor;
use crate::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding of `k / 2` on both sides; output length `ceil(L / stride)`.
    Same,
    /// No padding; output length `(L - k) / stride + 1`.
    Valid,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    SumAll(Var),
    SumAxis { x: Var, outer: usize, axis: usize, inner: usize, mean: bool },
    SqEuclidean(Var, Var),
    PairwiseSqDist(Var, Var),
    MatMul(Var, Var),
    LogSoftmaxRows(Var),
    ConcatRows(Vec<Var>),
    Conv1d { x: Var, w: Var, b: Option<Var>, geom: Conv1dGeom },
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: Conv2dGeom },
    InstanceNorm { x: Var, gamma: Var, beta: Var, channels: usize, group: usize, saved: Box<NormSaved> },
    Fold { x: Var, len: usize, padded: usize },
    Unfold { x: Var, len: usize, padded: usize },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf | Constant => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | SqEuclidean(a, b) | PairwiseSqDist(a, b) | MatMul(a, b) => {
                vec![*a, *b]
            }
            Neg(a) | Scale(a, _) | AddScalar(a) | Relu(a) | Exp(a) | Log(a) | Sqrt(a) | SumAll(a)
            | LogSoftmaxRows(a) => vec![*a],
            SumAxis { x, .. } | Fold { x, .. } | Unfold { x, .. } => vec![*x],
            ConcatRows(v) => v.clone(),
            Conv1d { x, w, b, .. } | Conv2d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b.iter().copied());
                v
            }
            InstanceNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
        }
    }

    fn name(&self) -> &'static str {
        use Op::*;
        match self {
            Leaf => "leaf",
            Constant => "constant",
            Add(..) => "add",
            Sub(..) => "sub",
            Mul(..) => "mul",
            Neg(..) => "neg",
            Scale(..) => "scale",
            AddScalar(..) => "add_scalar",
            Relu(..) => "relu",
            Exp(..) => "exp",
            Log(..) => "log",
            Sqrt(..) => "sqrt",
            SumAll(..) => "sum",
            SumAxis { mean: false, .. } => "sum_axis",
            SumAxis { mean: true, .. } => "mean_axis",
            SqEuclidean(..) => "sq_euclidean",
            PairwiseSqDist(..) => "pairwise_sq_dist",
            MatMul(..) => "matmul",
            LogSoftmaxRows(..) => "log_softmax",
            ConcatRows(..) => "concat_rows",
            Conv1d { .. } => "conv1d",
            Conv2d { .. } => "conv2d",
            InstanceNorm { .. } => "instance_norm",
            Fold { .. } => "fold",
            Unfold { .. } => "unfold",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// An append-only tape of tensor operations.
///
/// Inputs always precede outputs, so insertion order is a topological order
/// and `backward` simply visits nodes from last to first.
///
/// A graph created with [`Graph::inference`] evaluates ops eagerly but
/// records nothing; calling `backward` on it is a state error.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    recording: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn dim_err(msg: String) -> Error {
    Error::Dimension(msg)
}

impl Graph {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), recording: true }
    }

    pub fn inference() -> Self {
        Self { nodes: Vec::new(), recording: false }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A differentiable input (parameter or input we want gradients for).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        let requires_grad = self.recording;
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad, grad: None });
        Var(self.nodes.len() - 1)
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, op: Op::Constant, requires_grad: false, grad: None });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if `backward` reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Gradient of a leaf as a tensor, zeros if it was not reached.
    pub fn grad_tensor(&self, v: Var) -> Tensor {
        let value = &self.nodes[v.0].value;
        match &self.nodes[v.0].grad {
            Some(g) => Tensor { shape: value.shape.clone(), data: g.clone() },
            None => Tensor::zeros(value.shape()),
        }
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Name of the op that produced `v` (for diagnostics and tests).
    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    /// Whether `to` depends on `from` through recorded ops.
    pub fn depends_on(&self, to: Var, from: Var) -> bool {
        if from.0 > to.0 {
            return false;
        }
        let mut reach = vec![false; to.0 + 1];
        reach[to.0] = true;
        for i in (from.0..=to.0).rev() {
            if !reach[i] {
                continue;
            }
            if i == from.0 {
                return true;
            }
            for inp in self.nodes[i].op.inputs() {
                if inp.0 >= from.0 {
                    reach[inp.0] = true;
                }
            }
        }
        false
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        let inputs = op.inputs();
        let requires_grad = self.recording && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        #[cfg(debug_assertions)]
        {
            if !value.is_finite() && inputs.iter().all(|v| self.nodes[v.0].value.is_finite()) {
                return Err(Error::Numeric(format!(
                    "{} produced non-finite values from finite inputs",
                    op.name()
                )));
            }
        }
        let op = if self.recording { op } else { Op::Constant };
        self.nodes.push(Node { value, op, requires_grad, grad: None });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let src = &self.nodes[a.0].value;
        let data = src.data.iter().map(|&v| f(v)).collect();
        let t = Tensor { shape: src.shape.clone(), data };
        self.push(t, op)
    }

    fn zip(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        let tb = &self.nodes[b.0].value;
        let t = if ta.shape == tb.shape {
            let data = ta.data.iter().zip(&tb.data).map(|(&x, &y)| f(x, y)).collect();
            Tensor { shape: ta.shape.clone(), data }
        } else if tb.len() == 1 {
            let y = tb.data[0];
            Tensor { shape: ta.shape.clone(), data: ta.data.iter().map(|&x| f(x, y)).collect() }
        } else if ta.len() == 1 {
            let x = ta.data[0];
            Tensor { shape: tb.shape.clone(), data: tb.data.iter().map(|&y| f(x, y)).collect() }
        } else {
            return Err(dim_err(format!("{what}: shapes {:?} and {:?} differ", ta.shape, tb.shape)));
        };
        self.push(t, op)
    }

    // ---- elementwise -------------------------------------------------------

    /// `a + b`; shapes must match or one side must hold a single value.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.map(a, |x| -x, Op::Neg(a))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.map(a, |x| x * s, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        self.map(a, |x| x + s, Op::AddScalar(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.map(a, |x| if x > 0.0 { x } else { 0.0 }, Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.map(a, libm::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.value(a).data().iter().find(|&&v| !(v > 0.0)) {
            return Err(Error::Domain(format!("log of non-positive value {bad}")));
        }
        self.map(a, libm::log, Op::Log(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.value(a).data().iter().find(|&&v| !(v >= 0.0)) {
            return Err(Error::Domain(format!("sqrt of negative value {bad}")));
        }
        self.map(a, libm::sqrt, Op::Sqrt(a))
    }

    // ---- reductions --------------------------------------------------------

    /// Sum of all entries, as a one-element tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum::<f64>();
        self.push(Tensor::scalar(s), Op::SumAll(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len() as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    fn reduce_axis(&mut self, a: Var, axis: usize, mean: bool) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::Argument(format!("axis {axis} out of range for shape {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let n = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out_shape: Vec<usize> = shape[..axis].iter().chain(&shape[axis + 1..]).copied().collect();
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let x = self.value(a).data();
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..n {
                let src = &x[(o * n + k) * inner..][..inner];
                let dst = &mut data[o * inner..][..inner];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        if mean {
            let inv = 1.0 / n as f64;
            data.iter_mut().for_each(|v| *v *= inv);
        }
        self.push(Tensor { shape: out_shape, data }, Op::SumAxis { x: a, outer, axis: n, inner, mean })
    }

    /// Sums out `axis`, removing it from the shape.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(a, axis, false)
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(a, axis, true)
    }

    /// `[B, C, L] -> [B, C]`, the mean over the time axis.
    pub fn global_avg_pool(&mut self, a: Var) -> Result<Var> {
        if self.shape(a).len() != 3 {
            return Err(dim_err(format!("global_avg_pool expects [B, C, L], got {:?}", self.shape(a))));
        }
        self.mean_axis(a, 2)
    }

    // ---- distances and linear algebra ----------------------------------------

    /// `sum_j (a_j - b_j)^2` as a one-element tensor.
    pub fn sq_euclidean(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sq_euclidean")?;
        let s = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>();
        self.push(Tensor::scalar(s), Op::SqEuclidean(a, b))
    }

    /// `[Q, W] x [N, W] -> [Q, N]` squared Euclidean distances.
    pub fn pairwise_sq_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(dim_err(format!("pairwise_sq_dist: shapes {sa:?} and {sb:?}")));
        }
        let (q, n, w) = (sa[0], sb[0], sa[1]);
        let (xa, xb) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(q * n);
        for i in 0..q {
            let ra = &xa[i * w..][..w];
            for j in 0..n {
                let rb = &xb[j * w..][..w];
                data.push(ra.iter().zip(rb).map(|(x, y)| (x - y) * (x - y)).sum::<f64>());
            }
        }
        self.push(Tensor { shape: vec![q, n], data }, Op::PairwiseSqDist(a, b))
    }

    /// `[M, K] x [K, N] -> [M, N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(dim_err(format!("matmul: shapes {sa:?} and {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut data = vec![0.0; m * n];
        matmul_acc(self.value(a).data(), self.value(b).data(), &mut data, m, k, n);
        self.push(Tensor { shape: vec![m, n], data }, Op::MatMul(a, b))
    }

    /// Row-wise log-softmax of a 2-D tensor, computed with max subtraction.
    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(dim_err(format!("log_softmax_rows expects 2-D input, got {s:?}")));
        }
        let (r, c) = (s[0], s[1]);
        let x = self.value(a).data();
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            let row = &x[i * c..][..c];
            let lse = log_sum_exp(row);
            data.extend(row.iter().map(|v| v - lse));
        }
        self.push(Tensor { shape: vec![r, c], data }, Op::LogSoftmaxRows(a))
    }

    /// Concatenates along axis 0; trailing dims must agree.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::Argument("concat of zero tensors".into()))?;
        let tail = self.shape(first)[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.len() != tail.len() + 1 || s[1..] != tail[..] {
                return Err(dim_err(format!("concat_rows: shape {s:?} incompatible with tail {tail:?}")));
            }
            rows += s[0];
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(&tail);
        self.push(Tensor { shape, data }, Op::ConcatRows(parts.to_vec()))
    }

    // ---- convolutions --------------------------------------------------------

    /// Cross-correlation over `[B, C, L]` with kernel `[O, C, K]` and optional bias `[O]`.
    pub fn conv1d(&mut self, x: Var, w: Var, bias: Option<Var>, stride: usize, padding: Padding) -> Result<Var> {
        if stride < 1 {
            return Err(Error::Argument("conv1d stride must be >= 1".into()));
        }
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 3 || sw.len() != 3 || sx[1] != sw[1] {
            return Err(dim_err(format!("conv1d: input {sx:?} vs kernel {sw:?}")));
        }
        let (batch, in_ch, len) = (sx[0], sx[1], sx[2]);
        let (out_ch, ksize) = (sw[0], sw[2]);
        let (pad, out_len) = match padding {
            Padding::Same => {
                if ksize % 2 == 0 {
                    return Err(Error::Argument(format!("same padding needs an odd kernel, got {ksize}")));
                }
                (ksize / 2, len.div_ceil(stride))
            }
            Padding::Valid => {
                if ksize > len {
                    return Err(dim_err(format!("conv1d: kernel {ksize} longer than input {len}")));
                }
                (0, (len - ksize) / stride + 1)
            }
        };
        if let Some(b) = bias {
            if self.shape(b) != [out_ch] {
                return Err(dim_err(format!("conv1d bias {:?} for {out_ch} outputs", self.shape(b))));
            }
        }
        let geom = Conv1dGeom { batch, in_ch, out_ch, len, ksize, stride, pad, out_len };
        let mut out = vec![0.0; batch * out_ch * out_len];
        kernels::conv1d_forward(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            bias.map(|b| self.value(b).data()),
            &mut out,
        );
        self.push(Tensor { shape: vec![batch, out_ch, out_len], data: out }, Op::Conv1d { x, w, b: bias, geom })
    }

    /// Same-padded, stride-1 cross-correlation over `[B, C, H, W]` with kernel `[O, C, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            return Err(dim_err(format!("conv2d: input {sx:?} vs kernel {sw:?}")));
        }
        if sw[2] % 2 == 0 || sw[3] % 2 == 0 {
            return Err(Error::Argument(format!("conv2d needs odd kernel sizes, got {sw:?}")));
        }
        let geom = Conv2dGeom { batch: sx[0], in_ch: sx[1], out_ch: sw[0], h: sx[2], w: sx[3], kh: sw[2], kw: sw[3] };
        if let Some(b) = bias {
            if self.shape(b) != [geom.out_ch] {
                return Err(dim_err(format!("conv2d bias {:?} for {} outputs", self.shape(b), geom.out_ch)));
            }
        }
        let mut out = vec![0.0; geom.batch * geom.out_ch * geom.h * geom.w];
        kernels::conv2d_forward(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            bias.map(|b| self.value(b).data()),
            &mut out,
        );
        let shape = vec![geom.batch, geom.out_ch, geom.h, geom.w];
        self.push(Tensor { shape, data: out }, Op::Conv2d { x, w, b: bias, geom })
    }

    /// Per-sample, per-channel normalization over all trailing axes of
    /// `[B, C, ...]`: `gamma * (x - mean) / (std + eps) + beta`.
    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() < 3 {
            return Err(dim_err(format!("instance_norm expects [B, C, ...], got {sx:?}")));
        }
        let channels = sx[1];
        if self.shape(gamma) != [channels] || self.shape(beta) != [channels] {
            return Err(dim_err(format!("instance_norm: affine parameters must be [{channels}]")));
        }
        let group: usize = sx[2..].iter().product();
        let mut out = vec![0.0; self.value(x).len()];
        let saved = kernels::instance_norm_forward(
            self.value(x).data(),
            channels,
            group,
            self.value(gamma).data(),
            self.value(beta).data(),
            eps,
            &mut out,
        );
        self.push(
            Tensor { shape: sx, data: out },
            Op::InstanceNorm { x, gamma, beta, channels, group, saved: Box::new(saved) },
        )
    }

    // ---- period folding ------------------------------------------------------

    /// `[B, C, L] -> [B, C, ceil(L/p), p]`, zero-padding the tail.
    pub fn fold_time(&mut self, x: Var, period: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(dim_err(format!("fold expects [B, C, L], got {s:?}")));
        }
        let len = s[2];
        if period < 1 || period > len {
            return Err(Error::Argument(format!("period {period} outside 1..={len}")));
        }
        let rows = len.div_ceil(period);
        let padded = rows * period;
        let data = repack(self.value(x).data(), len, padded);
        self.push(Tensor { shape: vec![s[0], s[1], rows, period], data }, Op::Fold { x, len, padded })
    }

    /// `[B, C, rows, p] -> [B, C, len]`, discarding the padded tail.
    pub fn unfold_time(&mut self, x: Var, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(dim_err(format!("unfold expects [B, C, rows, p], got {s:?}")));
        }
        let padded = s[2] * s[3];
        if len > padded || padded - len >= s[3] || len == 0 {
            return Err(dim_err(format!("unfold: view {s:?} inconsistent with length {len}")));
        }
        let data = repack(self.value(x).data(), padded, len);
        self.push(Tensor { shape: vec![s[0], s[1], len], data }, Op::Unfold { x, len, padded })
    }

    // ---- backward ------------------------------------------------------------

    /// Accumulates `d loss / d leaf` into every reachable leaf.
    ///
    /// Leaf gradients are summed across calls until [`Graph::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.recording {
            return Err(Error::State("backward called on a graph that is not recording".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::State(format!("backward needs a scalar loss, got {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                match &mut self.nodes[i].grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let val = |v: Var| self.nodes[v.0].value.data();
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        // gradient buffer of an input, created on first use
        fn slot<'a>(grads: &'a mut [Option<Vec<f64>>], v: Var, n: usize) -> &'a mut Vec<f64> {
            grads[v.0].get_or_insert_with(|| vec![0.0; n])
        }
        let len_of = |v: Var| self.nodes[v.0].value.len();

        // Elementwise binary ops may broadcast a single value; reduce accordingly.
        let acc_broadcast = |grads: &mut [Option<Vec<f64>>], v: Var, contrib: &mut dyn Iterator<Item = f64>| {
            let n = len_of(v);
            let dst = slot(grads, v, n);
            if n == 1 {
                dst[0] += contrib.sum::<f64>();
            } else {
                for (d, c) in dst.iter_mut().zip(contrib) {
                    *d += c;
                }
            }
        };
        let at = |data: &[f64], k: usize| if data.len() == 1 { data[0] } else { data[k] };

        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if needs(v) {
                        acc_broadcast(grads, v, &mut g.iter().copied());
                    }
                }
            }
            Op::Sub(a, b) => {
                if needs(*a) {
                    acc_broadcast(grads, *a, &mut g.iter().copied());
                }
                if needs(*b) {
                    acc_broadcast(grads, *b, &mut g.iter().map(|x| -x));
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                if needs(*a) {
                    acc_broadcast(grads, *a, &mut g.iter().enumerate().map(|(k, x)| x * at(vb, k)));
                }
                if needs(*b) {
                    acc_broadcast(grads, *b, &mut g.iter().enumerate().map(|(k, x)| x * at(va, k)));
                }
            }
            Op::Neg(a) => acc_broadcast(grads, *a, &mut g.iter().map(|x| -x)),
            Op::Scale(a, s) => acc_broadcast(grads, *a, &mut g.iter().map(|x| x * s)),
            Op::AddScalar(a) => acc_broadcast(grads, *a, &mut g.iter().copied()),
            Op::Relu(a) => {
                let va = val(*a);
                acc_broadcast(grads, *a, &mut g.iter().zip(va).map(|(x, &v)| if v > 0.0 { *x } else { 0.0 }));
            }
            Op::Exp(a) => {
                let out = node.value.data();
                acc_broadcast(grads, *a, &mut g.iter().zip(out).map(|(x, y)| x * y));
            }
            Op::Log(a) => {
                let va = val(*a);
                acc_broadcast(grads, *a, &mut g.iter().zip(va).map(|(x, v)| x / v));
            }
            Op::Sqrt(a) => {
                let out = node.value.data();
                acc_broadcast(grads, *a, &mut g.iter().zip(out).map(|(x, y)| x * 0.5 / y));
            }
            Op::SumAll(a) => {
                let n = len_of(*a);
                let dst = slot(grads, *a, n);
                dst.iter_mut().for_each(|d| *d += g[0]);
            }
            Op::SumAxis { x, outer, axis, inner, mean } => {
                let scale = if *mean { 1.0 / *axis as f64 } else { 1.0 };
                let dst = slot(grads, *x, outer * axis * inner);
                for o in 0..*outer {
                    let src = &g[o * inner..][..*inner];
                    for k in 0..*axis {
                        let d = &mut dst[(o * axis + k) * inner..][..*inner];
                        for (dv, sv) in d.iter_mut().zip(src) {
                            *dv += sv * scale;
                        }
                    }
                }
            }
            Op::SqEuclidean(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                if needs(*a) {
                    let dst = slot(grads, *a, va.len());
                    for ((d, x), y) in dst.iter_mut().zip(va).zip(vb) {
                        *d += 2.0 * g[0] * (x - y);
                    }
                }
                if needs(*b) {
                    let dst = slot(grads, *b, vb.len());
                    for ((d, x), y) in dst.iter_mut().zip(va).zip(vb) {
                        *d -= 2.0 * g[0] * (x - y);
                    }
                }
            }
            Op::PairwiseSqDist(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let w = self.shape(*a)[1];
                let (q, n) = (va.len() / w, vb.len() / w);
                if needs(*a) {
                    let dst = slot(grads, *a, va.len());
                    for i in 0..q {
                        for j in 0..n {
                            let c = 2.0 * g[i * n + j];
                            for k in 0..w {
                                dst[i * w + k] += c * (va[i * w + k] - vb[j * w + k]);
                            }
                        }
                    }
                }
                if needs(*b) {
                    let dst = slot(grads, *b, vb.len());
                    for i in 0..q {
                        for j in 0..n {
                            let c = 2.0 * g[i * n + j];
                            for k in 0..w {
                                dst[j * w + k] -= c * (va[i * w + k] - vb[j * w + k]);
                            }
                        }
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if needs(*a) {
                    // dA = G B^T
                    let bt = transpose(val(*b), k, n);
                    let dst = slot(grads, *a, m * k);
                    matmul_acc(g, &bt, dst, m, n, k);
                }
                if needs(*b) {
                    // dB = A^T G
                    let at_ = transpose(val(*a), m, k);
                    let dst = slot(grads, *b, k * n);
                    matmul_acc(&at_, g, dst, k, m, n);
                }
            }
            Op::LogSoftmaxRows(a) => {
                let c = self.shape(*a)[1];
                let out = node.value.data();
                let dst = slot(grads, *a, out.len());
                for (r, (gr, yr)) in g.chunks(c).zip(out.chunks(c)).enumerate() {
                    let s: f64 = gr.iter().sum();
                    for j in 0..c {
                        dst[r * c + j] += gr[j] - libm::exp(yr[j]) * s;
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = len_of(p);
                    if needs(p) {
                        let dst = slot(grads, p, n);
                        for (d, s) in dst.iter_mut().zip(&g[off..off + n]) {
                            *d += s;
                        }
                    }
                    off += n;
                }
            }
            Op::Conv1d { x, w, b, geom } => {
                let (vx, vw) = (val(*x), val(*w));
                let mut gx = needs(*x).then(|| grads[x.0].take().unwrap_or_else(|| vec![0.0; vx.len()]));
                let mut gw = needs(*w).then(|| grads[w.0].take().unwrap_or_else(|| vec![0.0; vw.len()]));
                let mut gb = b
                    .filter(|b| needs(*b))
                    .map(|bv| grads[bv.0].take().unwrap_or_else(|| vec![0.0; len_of(bv)]));
                kernels::conv1d_backward(geom, vx, vw, g, gx.as_deref_mut(), gw.as_deref_mut(), gb.as_deref_mut());
                if let Some(v) = gx {
                    grads[x.0] = Some(v);
                }
                if let Some(v) = gw {
                    grads[w.0] = Some(v);
                }
                if let (Some(v), Some(bv)) = (gb, b) {
                    grads[bv.0] = Some(v);
                }
            }
            Op::Conv2d { x, w, b, geom } => {
                let (vx, vw) = (val(*x), val(*w));
                let mut gx = needs(*x).then(|| grads[x.0].take().unwrap_or_else(|| vec![0.0; vx.len()]));
                let mut gw = needs(*w).then(|| grads[w.0].take().unwrap_or_else(|| vec![0.0; vw.len()]));
                let mut gb = b
                    .filter(|b| needs(*b))
                    .map(|bv| grads[bv.0].take().unwrap_or_else(|| vec![0.0; len_of(bv)]));
                kernels::conv2d_backward(geom, vx, vw, g, gx.as_deref_mut(), gw.as_deref_mut(), gb.as_deref_mut());
                if let Some(v) = gx {
                    grads[x.0] = Some(v);
                }
                if let Some(v) = gw {
                    grads[w.0] = Some(v);
                }
                if let (Some(v), Some(bv)) = (gb, b) {
                    grads[bv.0] = Some(v);
                }
            }
            Op::InstanceNorm { x, gamma, beta, channels, group, saved } => {
                let vg = val(*gamma);
                let mut gx = needs(*x).then(|| grads[x.0].take().unwrap_or_else(|| vec![0.0; len_of(*x)]));
                let mut gg = needs(*gamma).then(|| grads[gamma.0].take().unwrap_or_else(|| vec![0.0; *channels]));
                let mut gb = needs(*beta).then(|| grads[beta.0].take().unwrap_or_else(|| vec![0.0; *channels]));
                kernels::instance_norm_backward(
                    saved,
                    *channels,
                    *group,
                    vg,
                    g,
                    gx.as_deref_mut(),
                    gg.as_deref_mut(),
                    gb.as_deref_mut(),
                );
                if let Some(v) = gx {
                    grads[x.0] = Some(v);
                }
                if let Some(v) = gg {
                    grads[gamma.0] = Some(v);
                }
                if let Some(v) = gb {
                    grads[beta.0] = Some(v);
                }
            }
            Op::Fold { x, len, padded } => {
                let back = repack(g, *padded, *len);
                acc_broadcast(grads, *x, &mut back.into_iter());
            }
            Op::Unfold { x, len, padded } => {
                let back = repack(g, *len, *padded);
                acc_broadcast(grads, *x, &mut back.into_iter());
            }
        }
    }
}

/// Copies consecutive blocks of `from` values into blocks of `to` values,
/// truncating or zero-padding each block.
pub(crate) fn repack(src: &[f64], from: usize, to: usize) -> Vec<f64> {
    let blocks = src.len() / from;
    let keep = from.min(to);
    let mut out = vec![0.0; blocks * to];
    for b in 0..blocks {
        out[b * to..b * to + keep].copy_from_slice(&src[b * from..b * from + keep]);
    }
    out
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + libm::log(row.iter().map(|v| libm::exp(v - m)).sum::<f64>())
}

fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            t[j * rows + i] = a[i * cols + j];
        }
    }
    t
}

/// `c += a[m,k] * b[k,n]`.
fn matmul_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..][..n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (cv, bv) in crow.iter_mut().zip(&b[p * n..][..n]) {
                *cv += av * bv;
            }
        }
    }
}
