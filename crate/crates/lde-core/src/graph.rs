//! Define-by-run computation graph with exact reverse-mode gradients.
//!
//! A fresh `Graph` is built for every forward pass; leaves hold parameters
//! and inputs, interior nodes own their forward value plus whatever the
//! backward pass needs (im2col buffers, normalized activations, softmax
//! probabilities, hard-mined triplet indices). `backward` walks the arena in
//! reverse insertion order, which is always a valid topological order here.
//!
//! Parallel sections use fixed chunk boundaries derived from tensor extents
//! only, and cross-chunk sums run sequentially in chunk order, so results are
//! bit-identical regardless of thread count.

use rayon::prelude::*;

use crate::error::{LdeError, Result};
use crate::linalg::{matmul, matmul_acc, matmul_at, matmul_at_acc, matmul_bt, matmul_bt_acc};
use crate::tensor::Tensor;

pub const NORM_EPS: f64 = 1e-5;
pub const COSINE_EPS: f64 = 1e-12;

/// Fixed number of sample chunks for parallel reductions.
const GRAD_CHUNKS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

/// Batch statistics produced by a train-mode batch norm, for the caller's
/// running-stat update.
#[derive(Debug, Clone)]
pub struct BnBatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

struct TripletTerm {
    anchor: usize,
    pos: usize,
    neg: usize,
    dap: f64,
    dan: f64,
    active: bool,
}

enum Op {
    Leaf,
    Conv2d { stride: usize, pad: usize, cols: Vec<f64> },
    InstanceNorm { xhat: Vec<f64>, inv_std: Vec<f64> },
    BatchNormTrain { xhat: Vec<f64>, inv_std: Vec<f64> },
    BatchNormEval { xhat: Vec<f64>, inv_std: Vec<f64> },
    Relu,
    Sigmoid,
    Add,
    Sub,
    Mul,
    Affine { mul: f64 },
    MulScalarNode,
    MatMul,
    MatMulBT,
    BatchMatMul,
    BatchMatMulBT,
    Linear,
    Gap,
    AvgPoolTo,
    SliceC { from: usize },
    ConcatC,
    MulChanNC,
    AddChanC,
    NormalizeRows { inv_norm: Vec<f64> },
    SoftmaxRows,
    Diag,
    MulRowVec,
    SumRows,
    MeanAxis0,
    MeanAll,
    Reshape,
    CeMean { labels: Vec<usize>, probs: Vec<f64> },
    BatchHardTriplet { terms: Vec<TripletTerm>, valid: usize },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::InstanceNorm { .. } => "instance_norm",
            Op::BatchNormTrain { .. } => "batch_norm(train)",
            Op::BatchNormEval { .. } => "batch_norm(eval)",
            Op::Relu => "relu",
            Op::Sigmoid => "sigmoid",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Affine { .. } => "affine",
            Op::MulScalarNode => "mul_scalar_node",
            Op::MatMul => "matmul",
            Op::MatMulBT => "matmul_bt",
            Op::BatchMatMul => "batch_matmul",
            Op::BatchMatMulBT => "batch_matmul_bt",
            Op::Linear => "linear",
            Op::Gap => "global_avg_pool",
            Op::AvgPoolTo => "avg_pool_to",
            Op::SliceC { .. } => "slice_channels",
            Op::ConcatC => "concat_channels",
            Op::MulChanNC => "mul_channels",
            Op::AddChanC => "add_channels",
            Op::NormalizeRows { .. } => "normalize_rows",
            Op::SoftmaxRows => "softmax_rows",
            Op::Diag => "diag",
            Op::MulRowVec => "mul_row_vec",
            Op::SumRows => "sum_rows",
            Op::MeanAxis0 => "mean_axis0",
            Op::MeanAll => "mean_all",
            Op::Reshape => "reshape",
            Op::CeMean { .. } => "ce_mean",
            Op::BatchHardTriplet { .. } => "batch_hard_triplet",
        }
    }
}

struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    value: Tensor,
    requires_grad: bool,
}

pub struct Grads {
    g: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.g[id.0].as_ref()
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.g[id.0].take()
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        assert!(value.is_finite(), "non-finite leaf tensor");
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { op: Op::Leaf, inputs: vec![], value, requires_grad });
        id
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, false)
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, value: Tensor) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(LdeError::numeric(format!("{} produced non-finite values", op.name())));
        }
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { op, inputs, value, requires_grad });
        Ok(id)
    }

    fn nchw(&self, id: NodeId, who: &str) -> Result<(usize, usize, usize, usize)> {
        match self.value(id).shape() {
            [n, c, h, w] => Ok((*n, *c, *h, *w)),
            s => Err(LdeError::shape(format!("{who} wants an NCHW tensor, got {s:?}"))),
        }
    }

    // ---- convolution ----

    pub fn conv2d(&mut self, x: NodeId, kernel: NodeId, stride: usize, pad: usize) -> Result<NodeId> {
        let (n, c, h, w) = self.nchw(x, "conv2d input")?;
        let (co, kc, kh, kw) = self.nchw(kernel, "conv2d kernel")?;
        if kc != c {
            return Err(LdeError::shape(format!(
                "conv2d: input {:?} has {c} channels but kernel {:?} expects {kc}",
                self.value(x).shape(),
                self.value(kernel).shape()
            )));
        }
        if stride < 1 {
            return Err(LdeError::shape("conv2d: stride must be ≥ 1"));
        }
        if kh > h + 2 * pad || kw > w + 2 * pad {
            return Err(LdeError::shape(format!(
                "conv2d: kernel {kh}×{kw} larger than padded input {}×{}",
                h + 2 * pad,
                w + 2 * pad
            )));
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        let (ohw, ckk) = (oh * ow, c * kh * kw);

        let xd = self.value(x).data();
        let kd = self.value(kernel).data();
        let mut cols = vec![0.0; n * ckk * ohw];
        let mut out = vec![0.0; n * co * ohw];
        out.par_chunks_mut(co * ohw)
            .zip(cols.par_chunks_mut(ckk * ohw))
            .enumerate()
            .for_each(|(i, (on, coln))| {
                im2col(&xd[i * c * h * w..(i + 1) * c * h * w], c, h, w, kh, kw, stride, pad, oh, ow, coln);
                matmul_acc(kd, coln, on, co, ckk, ohw);
            });
        let value = Tensor::new(vec![n, co, oh, ow], out)?;
        self.push(Op::Conv2d { stride, pad, cols }, vec![x, kernel], value)
    }

    // ---- normalization ----

    pub fn instance_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId> {
        let (n, c, h, w) = self.nchw(x, "instance_norm")?;
        if eps <= 0.0 {
            return Err(LdeError::numeric(format!("instance_norm: eps must be > 0, got {eps}")));
        }
        self.check_chan_affine(gamma, beta, c, "instance_norm")?;
        let hw = h * w;
        let xd = self.value(x).data();
        let gd = self.value(gamma).data().to_vec();
        let bd = self.value(beta).data().to_vec();
        let mut xhat = vec![0.0; n * c * hw];
        let mut inv_std = vec![0.0; n * c];
        let mut out = vec![0.0; n * c * hw];
        for g in 0..n * c {
            let xs = &xd[g * hw..(g + 1) * hw];
            let mean = xs.iter().sum::<f64>() / hw as f64;
            let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / hw as f64;
            let r = 1.0 / (var + eps).sqrt();
            inv_std[g] = r;
            let (gc, bc) = (gd[g % c], bd[g % c]);
            for i in 0..hw {
                let xh = (xs[i] - mean) * r;
                xhat[g * hw + i] = xh;
                out[g * hw + i] = gc * xh + bc;
            }
        }
        let value = Tensor::new(vec![n, c, h, w], out)?;
        self.push(Op::InstanceNorm { xhat, inv_std }, vec![x, gamma, beta], value)
    }

    /// Train-mode batch norm; returns the batch statistics so the caller can
    /// fold them into its running estimates.
    pub fn batch_norm_train(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<(NodeId, BnBatchStats)> {
        let (n, c, h, w) = self.nchw(x, "batch_norm")?;
        if eps <= 0.0 {
            return Err(LdeError::numeric(format!("batch_norm: eps must be > 0, got {eps}")));
        }
        if n * h * w < 2 {
            return Err(LdeError::shape(format!(
                "batch_norm train mode needs ≥ 2 values per channel, got {}",
                n * h * w
            )));
        }
        self.check_chan_affine(gamma, beta, c, "batch_norm")?;
        let hw = h * w;
        let g_len = (n * hw) as f64;
        let xd = self.value(x).data();
        let gd = self.value(gamma).data().to_vec();
        let bd = self.value(beta).data().to_vec();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ch in 0..c {
            let mut s = 0.0;
            for ni in 0..n {
                let base = (ni * c + ch) * hw;
                s += xd[base..base + hw].iter().sum::<f64>();
            }
            let m = s / g_len;
            let mut v = 0.0;
            for ni in 0..n {
                let base = (ni * c + ch) * hw;
                v += xd[base..base + hw].iter().map(|x| (x - m) * (x - m)).sum::<f64>();
            }
            mean[ch] = m;
            var[ch] = v / g_len;
        }
        let mut xhat = vec![0.0; n * c * hw];
        let mut inv_std = vec![0.0; c];
        let mut out = vec![0.0; n * c * hw];
        for ch in 0..c {
            let r = 1.0 / (var[ch] + eps).sqrt();
            inv_std[ch] = r;
            for ni in 0..n {
                let base = (ni * c + ch) * hw;
                for i in 0..hw {
                    let xh = (xd[base + i] - mean[ch]) * r;
                    xhat[base + i] = xh;
                    out[base + i] = gd[ch] * xh + bd[ch];
                }
            }
        }
        let value = Tensor::new(vec![n, c, h, w], out)?;
        let id = self.push(Op::BatchNormTrain { xhat, inv_std }, vec![x, gamma, beta], value)?;
        Ok((id, BnBatchStats { mean, var }))
    }

    /// Eval-mode batch norm against frozen running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<NodeId> {
        let (n, c, h, w) = self.nchw(x, "batch_norm")?;
        if eps <= 0.0 {
            return Err(LdeError::numeric(format!("batch_norm: eps must be > 0, got {eps}")));
        }
        self.check_chan_affine(gamma, beta, c, "batch_norm")?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(LdeError::shape(format!(
                "batch_norm eval: running stats length {}/{} vs {c} channels",
                running_mean.len(),
                running_var.len()
            )));
        }
        let hw = h * w;
        let xd = self.value(x).data();
        let gd = self.value(gamma).data().to_vec();
        let bd = self.value(beta).data().to_vec();
        let mut xhat = vec![0.0; n * c * hw];
        let mut inv_std = vec![0.0; c];
        let mut out = vec![0.0; n * c * hw];
        for ch in 0..c {
            let r = 1.0 / (running_var[ch] + eps).sqrt();
            inv_std[ch] = r;
            for ni in 0..n {
                let base = (ni * c + ch) * hw;
                for i in 0..hw {
                    let xh = (xd[base + i] - running_mean[ch]) * r;
                    xhat[base + i] = xh;
                    out[base + i] = gd[ch] * xh + bd[ch];
                }
            }
        }
        let value = Tensor::new(vec![n, c, h, w], out)?;
        self.push(Op::BatchNormEval { xhat, inv_std }, vec![x, gamma, beta], value)
    }

    fn check_chan_affine(&self, gamma: NodeId, beta: NodeId, c: usize, who: &str) -> Result<()> {
        for (id, what) in [(gamma, "gamma"), (beta, "beta")] {
            let s = self.value(id).shape();
            if s != [c] {
                return Err(LdeError::shape(format!("{who}: {what} shape {s:?}, want [{c}]")));
            }
        }
        Ok(())
    }

    // ---- elementwise ----

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let mut v = self.value(x).clone();
        for e in v.data_mut() {
            if *e < 0.0 {
                *e = 0.0;
            }
        }
        self.push(Op::Relu, vec![x], v)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        let mut v = self.value(x).clone();
        for e in v.data_mut() {
            *e = if *e >= 0.0 {
                1.0 / (1.0 + (-*e).exp())
            } else {
                let t = e.exp();
                t / (1.0 + t)
            };
        }
        self.push(Op::Sigmoid, vec![x], v)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_elementwise(a, b, Op::Add, |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_elementwise(a, b, Op::Sub, |x, y| x - y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_elementwise(a, b, Op::Mul, |x, y| x * y)
    }

    fn zip_elementwise(&mut self, a: NodeId, b: NodeId, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<NodeId> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(LdeError::shape(format!("{}: shapes {sa:?} vs {sb:?}", op.name())));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        let value = Tensor::new(sa.to_vec(), data)?;
        self.push(op, vec![a, b], value)
    }

    /// y = mul·x + add, scalar coefficients.
    pub fn affine(&mut self, x: NodeId, mul: f64, add: f64) -> Result<NodeId> {
        let mut v = self.value(x).clone();
        for e in v.data_mut() {
            *e = mul * *e + add;
        }
        self.push(Op::Affine { mul }, vec![x], v)
    }

    pub fn scale(&mut self, x: NodeId, s: f64) -> Result<NodeId> {
        self.affine(x, s, 0.0)
    }

    pub fn one_minus(&mut self, x: NodeId) -> Result<NodeId> {
        self.affine(x, -1.0, 1.0)
    }

    /// x (any shape) scaled by a one-element node s.
    pub fn mul_scalar_node(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        if self.value(s).numel() != 1 {
            return Err(LdeError::shape(format!(
                "mul_scalar_node: scale shape {:?}, want a single element",
                self.value(s).shape()
            )));
        }
        let sv = self.value(s).data()[0];
        let mut v = self.value(x).clone();
        for e in v.data_mut() {
            *e *= sv;
        }
        self.push(Op::MulScalarNode, vec![x, s], v)
    }

    // ---- matrix products ----

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (r, k) = self.mat2(a, "matmul lhs")?;
        let (kb, s) = self.mat2(b, "matmul rhs")?;
        if k != kb {
            return Err(LdeError::shape(format!(
                "matmul: {:?} × {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let data = matmul(self.value(a).data(), self.value(b).data(), r, k, s);
        let value = Tensor::new(vec![r, s], data)?;
        self.push(Op::MatMul, vec![a, b], value)
    }

    /// A[R,K] × B[S,K]ᵀ.
    pub fn matmul_bt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (r, k) = self.mat2(a, "matmul_bt lhs")?;
        let (s, kb) = self.mat2(b, "matmul_bt rhs")?;
        if k != kb {
            return Err(LdeError::shape(format!(
                "matmul_bt: {:?} × {:?}ᵀ",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let data = matmul_bt(self.value(a).data(), self.value(b).data(), r, k, s);
        let value = Tensor::new(vec![r, s], data)?;
        self.push(Op::MatMulBT, vec![a, b], value)
    }

    /// A[N,R,K] × B[N,K,S] per sample.
    pub fn batch_matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (n, r, k) = self.mat3(a, "batch_matmul lhs")?;
        let (nb, kb, s) = self.mat3(b, "batch_matmul rhs")?;
        if n != nb || k != kb {
            return Err(LdeError::shape(format!(
                "batch_matmul: {:?} × {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let ad = self.value(a).data();
        let bd = self.value(b).data();
        let mut out = vec![0.0; n * r * s];
        out.par_chunks_mut(r * s).enumerate().for_each(|(i, on)| {
            matmul_acc(&ad[i * r * k..(i + 1) * r * k], &bd[i * k * s..(i + 1) * k * s], on, r, k, s);
        });
        let value = Tensor::new(vec![n, r, s], out)?;
        self.push(Op::BatchMatMul, vec![a, b], value)
    }

    /// A[N,R,K] × B[N,S,K]ᵀ per sample.
    pub fn batch_matmul_bt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (n, r, k) = self.mat3(a, "batch_matmul_bt lhs")?;
        let (nb, s, kb) = self.mat3(b, "batch_matmul_bt rhs")?;
        if n != nb || k != kb {
            return Err(LdeError::shape(format!(
                "batch_matmul_bt: {:?} × {:?}ᵀ",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let ad = self.value(a).data();
        let bd = self.value(b).data();
        let mut out = vec![0.0; n * r * s];
        out.par_chunks_mut(r * s).enumerate().for_each(|(i, on)| {
            matmul_bt_acc(&ad[i * r * k..(i + 1) * r * k], &bd[i * s * k..(i + 1) * s * k], on, r, k, s);
        });
        let value = Tensor::new(vec![n, r, s], out)?;
        self.push(Op::BatchMatMulBT, vec![a, b], value)
    }

    /// x[B,D] × W[C,D]ᵀ + b[C].
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (bs, d) = self.mat2(x, "linear input")?;
        let (c, dw) = self.mat2(w, "linear weight")?;
        if d != dw || self.value(b).shape() != [c] {
            return Err(LdeError::shape(format!(
                "linear: x {:?}, W {:?}, b {:?}",
                self.value(x).shape(),
                self.value(w).shape(),
                self.value(b).shape()
            )));
        }
        let mut out = matmul_bt(self.value(x).data(), self.value(w).data(), bs, d, c);
        let bias = self.value(b).data();
        for row in out.chunks_mut(c) {
            for (o, bv) in row.iter_mut().zip(bias) {
                *o += bv;
            }
        }
        let value = Tensor::new(vec![bs, c], out)?;
        self.push(Op::Linear, vec![x, w, b], value)
    }

    fn mat2(&self, id: NodeId, who: &str) -> Result<(usize, usize)> {
        match self.value(id).shape() {
            [r, c] => Ok((*r, *c)),
            s => Err(LdeError::shape(format!("{who} wants a matrix, got {s:?}"))),
        }
    }

    fn mat3(&self, id: NodeId, who: &str) -> Result<(usize, usize, usize)> {
        match self.value(id).shape() {
            [n, r, c] => Ok((*n, *r, *c)),
            s => Err(LdeError::shape(format!("{who} wants a rank-3 tensor, got {s:?}"))),
        }
    }

    // ---- pooling / channel plumbing ----

    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let (n, c, h, w) = self.nchw(x, "global_avg_pool")?;
        let hw = h * w;
        let xd = self.value(x).data();
        let mut out = vec![0.0; n * c];
        for g in 0..n * c {
            out[g] = xd[g * hw..(g + 1) * hw].iter().sum::<f64>() / hw as f64;
        }
        let value = Tensor::new(vec![n, c], out)?;
        self.push(Op::Gap, vec![x], value)
    }

    /// Average pooling to an exact target spatial size; extents must divide.
    pub fn avg_pool_to(&mut self, x: NodeId, oh: usize, ow: usize) -> Result<NodeId> {
        let (n, c, h, w) = self.nchw(x, "avg_pool_to")?;
        if oh == 0 || ow == 0 || h % oh != 0 || w % ow != 0 {
            return Err(LdeError::shape(format!("avg_pool_to: {h}×{w} not divisible into {oh}×{ow}")));
        }
        let (wy, wx) = (h / oh, w / ow);
        let win = (wy * wx) as f64;
        let xd = self.value(x).data();
        let mut out = vec![0.0; n * c * oh * ow];
        for g in 0..n * c {
            let xs = &xd[g * h * w..(g + 1) * h * w];
            let os = &mut out[g * oh * ow..(g + 1) * oh * ow];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = 0.0;
                    for dy in 0..wy {
                        for dx in 0..wx {
                            s += xs[(oy * wy + dy) * w + ox * wx + dx];
                        }
                    }
                    os[oy * ow + ox] = s / win;
                }
            }
        }
        let value = Tensor::new(vec![n, c, oh, ow], out)?;
        self.push(Op::AvgPoolTo, vec![x], value)
    }

    pub fn slice_channels(&mut self, x: NodeId, from: usize, to: usize) -> Result<NodeId> {
        let (n, c, h, w) = self.nchw(x, "slice_channels")?;
        if from >= to || to > c {
            return Err(LdeError::shape(format!("slice_channels: [{from}, {to}) of {c} channels")));
        }
        let hw = h * w;
        let cs = to - from;
        let xd = self.value(x).data();
        let mut out = vec![0.0; n * cs * hw];
        for ni in 0..n {
            let src = &xd[(ni * c + from) * hw..(ni * c + to) * hw];
            out[ni * cs * hw..(ni + 1) * cs * hw].copy_from_slice(src);
        }
        let value = Tensor::new(vec![n, cs, h, w], out)?;
        self.push(Op::SliceC { from }, vec![x], value)
    }

    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (n, ca, h, w) = self.nchw(a, "concat_channels lhs")?;
        let (nb, cb, hb, wb) = self.nchw(b, "concat_channels rhs")?;
        if n != nb || h != hb || w != wb {
            return Err(LdeError::shape(format!(
                "concat_channels: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let hw = h * w;
        let ad = self.value(a).data();
        let bd = self.value(b).data();
        let mut out = vec![0.0; n * (ca + cb) * hw];
        for ni in 0..n {
            let dst = &mut out[ni * (ca + cb) * hw..(ni + 1) * (ca + cb) * hw];
            dst[..ca * hw].copy_from_slice(&ad[ni * ca * hw..(ni + 1) * ca * hw]);
            dst[ca * hw..].copy_from_slice(&bd[ni * cb * hw..(ni + 1) * cb * hw]);
        }
        let value = Tensor::new(vec![n, ca + cb, h, w], out)?;
        self.push(Op::ConcatC, vec![a, b], value)
    }

    /// x[N,C,H,W] ⊙ a[N,C] broadcast over the spatial dims.
    pub fn mul_channels(&mut self, x: NodeId, a: NodeId) -> Result<NodeId> {
        let (n, c, h, w) = self.nchw(x, "mul_channels")?;
        if self.value(a).shape() != [n, c] {
            return Err(LdeError::shape(format!(
                "mul_channels: map {:?} vs weights {:?}",
                self.value(x).shape(),
                self.value(a).shape()
            )));
        }
        let hw = h * w;
        let xd = self.value(x).data();
        let ad = self.value(a).data();
        let mut out = vec![0.0; n * c * hw];
        for g in 0..n * c {
            let av = ad[g];
            for i in 0..hw {
                out[g * hw + i] = xd[g * hw + i] * av;
            }
        }
        let value = Tensor::new(vec![n, c, h, w], out)?;
        self.push(Op::MulChanNC, vec![x, a], value)
    }

    /// x[N,C,H,W] + b[C] broadcast over batch and spatial dims.
    pub fn add_channels(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let (n, c, h, w) = self.nchw(x, "add_channels")?;
        if self.value(b).shape() != [c] {
            return Err(LdeError::shape(format!(
                "add_channels: map {:?} vs bias {:?}",
                self.value(x).shape(),
                self.value(b).shape()
            )));
        }
        let hw = h * w;
        let xd = self.value(x).data();
        let bd = self.value(b).data();
        let mut out = vec![0.0; n * c * hw];
        for g in 0..n * c {
            let bv = bd[g % c];
            for i in 0..hw {
                out[g * hw + i] = xd[g * hw + i] + bv;
            }
        }
        let value = Tensor::new(vec![n, c, h, w], out)?;
        self.push(Op::AddChanC, vec![x, b], value)
    }

    // ---- rows: normalize / softmax / reductions ----

    /// L2-normalizes along the last dim: y = x / √(Σx² + eps).
    pub fn normalize_rows(&mut self, x: NodeId, eps: f64) -> Result<NodeId> {
        let shape = self.value(x).shape().to_vec();
        let cols = *shape.last().ok_or_else(|| LdeError::shape("normalize_rows: rank 0"))?;
        let rows = self.value(x).numel() / cols;
        let xd = self.value(x).data();
        let mut inv_norm = vec![0.0; rows];
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let xs = &xd[r * cols..(r + 1) * cols];
            let n2: f64 = xs.iter().map(|v| v * v).sum();
            let inv = 1.0 / (n2 + eps).sqrt();
            inv_norm[r] = inv;
            for i in 0..cols {
                out[r * cols + i] = xs[i] * inv;
            }
        }
        let value = Tensor::new(shape, out)?;
        self.push(Op::NormalizeRows { inv_norm }, vec![x], value)
    }

    /// Row softmax along the last dim; `mask` entries set to true are treated
    /// as −∞ and come out exactly zero. The mask is a constant: no gradient
    /// flows through its construction.
    pub fn softmax_rows(&mut self, x: NodeId, mask: Option<&[bool]>) -> Result<NodeId> {
        let shape = self.value(x).shape().to_vec();
        let cols = *shape.last().ok_or_else(|| LdeError::shape("softmax_rows: rank 0"))?;
        let rows = self.value(x).numel() / cols;
        if let Some(m) = mask {
            if m.len() != rows * cols {
                return Err(LdeError::shape(format!(
                    "softmax_rows: mask length {} vs {} entries",
                    m.len(),
                    rows * cols
                )));
            }
        }
        let xd = self.value(x).data();
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let xs = &xd[r * cols..(r + 1) * cols];
            let alive = |i: usize| mask.is_none_or(|m| !m[r * cols + i]);
            let mut mx = f64::NEG_INFINITY;
            for (i, &v) in xs.iter().enumerate() {
                if alive(i) && v > mx {
                    mx = v;
                }
            }
            if mx == f64::NEG_INFINITY {
                return Err(LdeError::numeric(format!("softmax_rows: row {r} fully masked")));
            }
            let mut z = 0.0;
            for i in 0..cols {
                if alive(i) {
                    let e = (xs[i] - mx).exp();
                    out[r * cols + i] = e;
                    z += e;
                }
            }
            for i in 0..cols {
                out[r * cols + i] /= z;
            }
        }
        let value = Tensor::new(shape, out)?;
        self.push(Op::SoftmaxRows, vec![x], value)
    }

    /// Diagonal of a square matrix.
    pub fn diag(&mut self, x: NodeId) -> Result<NodeId> {
        let (r, c) = self.mat2(x, "diag")?;
        if r != c {
            return Err(LdeError::shape(format!("diag: matrix {r}×{c} not square")));
        }
        let xd = self.value(x).data();
        let out: Vec<f64> = (0..r).map(|i| xd[i * c + i]).collect();
        let value = Tensor::new(vec![r], out)?;
        self.push(Op::Diag, vec![x], value)
    }

    /// x[B,C] ⊙ v[C] broadcast across rows.
    pub fn mul_row_vec(&mut self, x: NodeId, v: NodeId) -> Result<NodeId> {
        let (b, c) = self.mat2(x, "mul_row_vec")?;
        if self.value(v).shape() != [c] {
            return Err(LdeError::shape(format!(
                "mul_row_vec: {:?} vs {:?}",
                self.value(x).shape(),
                self.value(v).shape()
            )));
        }
        let xd = self.value(x).data();
        let vd = self.value(v).data();
        let out: Vec<f64> = xd.iter().enumerate().map(|(i, x)| x * vd[i % c]).collect();
        let value = Tensor::new(vec![b, c], out)?;
        self.push(Op::MulRowVec, vec![x, v], value)
    }

    pub fn sum_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let (b, c) = self.mat2(x, "sum_rows")?;
        let xd = self.value(x).data();
        let out: Vec<f64> = (0..b).map(|i| xd[i * c..(i + 1) * c].iter().sum()).collect();
        let value = Tensor::new(vec![b], out)?;
        self.push(Op::SumRows, vec![x], value)
    }

    pub fn mean_axis0(&mut self, x: NodeId) -> Result<NodeId> {
        let (b, c) = self.mat2(x, "mean_axis0")?;
        let xd = self.value(x).data();
        let mut out = vec![0.0; c];
        for i in 0..b {
            for j in 0..c {
                out[j] += xd[i * c + j];
            }
        }
        for o in out.iter_mut() {
            *o /= b as f64;
        }
        let value = Tensor::new(vec![c], out)?;
        self.push(Op::MeanAxis0, vec![x], value)
    }

    pub fn mean_all(&mut self, x: NodeId) -> Result<NodeId> {
        let n = self.value(x).numel();
        let s: f64 = self.value(x).data().iter().sum();
        let value = Tensor::scalar(s / n as f64);
        self.push(Op::MeanAll, vec![x], value)
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let value = self.value(x).reshape(shape)?;
        self.push(Op::Reshape, vec![x], value)
    }

    // ---- losses ----

    /// Mean cross-entropy of logits[B,M] against integer labels.
    pub fn ce_mean(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let (b, m) = self.mat2(logits, "ce_mean")?;
        if labels.len() != b {
            return Err(LdeError::shape(format!("ce_mean: {} labels for batch {b}", labels.len())));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= m) {
            return Err(LdeError::data(format!("ce_mean: label {bad} out of {m} classes")));
        }
        let xd = self.value(logits).data();
        let mut probs = vec![0.0; b * m];
        let mut loss = 0.0;
        for i in 0..b {
            let row = &xd[i * m..(i + 1) * m];
            let mx = row.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v));
            let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
            let logz = mx + z.ln();
            for j in 0..m {
                probs[i * m + j] = (row[j] - logz).exp();
            }
            loss += logz - row[labels[i]];
        }
        let value = Tensor::scalar(loss / b as f64);
        self.push(Op::CeMean { labels: labels.to_vec(), probs }, vec![logits], value)
    }

    /// Batch-hard triplet loss on raw (unnormalized) embeddings[B,D] with
    /// Euclidean distances. Anchors lacking a positive are skipped; ties go
    /// to the lowest index.
    pub fn batch_hard_triplet(&mut self, emb: NodeId, labels: &[usize], margin: f64) -> Result<NodeId> {
        let (b, d) = self.mat2(emb, "batch_hard_triplet")?;
        if labels.len() != b {
            return Err(LdeError::shape(format!(
                "batch_hard_triplet: {} labels for batch {b}",
                labels.len()
            )));
        }
        let mut counts = std::collections::BTreeMap::new();
        for &l in labels {
            *counts.entry(l).or_insert(0usize) += 1;
        }
        if counts.len() < 2 || !counts.values().any(|&c| c >= 2) {
            return Err(LdeError::data(format!(
                "batch_hard_triplet: batch needs ≥ 2 identities and ≥ 2 instances of one \
                 identity, got {} identities with max count {}",
                counts.len(),
                counts.values().max().copied().unwrap_or(0)
            )));
        }
        let xd = self.value(emb).data();
        let dist = |a: usize, p: usize| -> f64 {
            let mut s = 0.0;
            for j in 0..d {
                let t = xd[a * d + j] - xd[p * d + j];
                s += t * t;
            }
            s.sqrt()
        };
        let mut terms = Vec::new();
        for a in 0..b {
            let mut pos: Option<(usize, f64)> = None;
            let mut neg: Option<(usize, f64)> = None;
            for o in 0..b {
                if o == a {
                    continue;
                }
                let dv = dist(a, o);
                if labels[o] == labels[a] {
                    if pos.is_none_or(|(_, best)| dv > best) {
                        pos = Some((o, dv));
                    }
                } else if neg.is_none_or(|(_, best)| dv < best) {
                    neg = Some((o, dv));
                }
            }
            let (Some((pi, dap)), Some((ni, dan))) = (pos, neg) else { continue };
            let hinge = dap - dan + margin;
            terms.push(TripletTerm { anchor: a, pos: pi, neg: ni, dap, dan, active: hinge > 0.0 });
        }
        let valid = terms.len();
        let loss = terms.iter().filter(|t| t.active).map(|t| t.dap - t.dan + margin).sum::<f64>()
            / valid as f64;
        let value = Tensor::scalar(loss);
        self.push(Op::BatchHardTriplet { terms, valid }, vec![emb], value)
    }

    // ---- backward ----

    pub fn backward(&self, root: NodeId) -> Result<Grads> {
        let rn = &self.nodes[root.0];
        if rn.value.numel() != 1 {
            return Err(LdeError::shape(format!(
                "backward root must be scalar, got {:?}",
                rn.value.shape()
            )));
        }
        if !rn.requires_grad {
            return Err(LdeError::numeric("backward: root does not depend on any parameter"));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(1.0));
        for id in (0..=root.0).rev() {
            if grads[id].is_none() || matches!(self.nodes[id].op, Op::Leaf) {
                continue;
            }
            if !self.nodes[id].requires_grad {
                grads[id] = None;
                continue;
            }
            let dy = grads[id].take().expect("checked above");
            self.backward_op(id, &dy, &mut grads)?;
        }
        Ok(Grads { g: grads })
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], id: NodeId, t: Tensor) {
        debug_assert_eq!(t.shape(), self.value(id).shape());
        match &mut grads[id.0] {
            slot @ None => *slot = Some(t),
            Some(g) => {
                for (gd, td) in g.data_mut().iter_mut().zip(t.data()) {
                    *gd += td;
                }
            }
        }
    }

    fn backward_op(&self, id: usize, dy: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[id];
        let ins = &node.inputs;
        let dyd = dy.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { stride, pad, cols } => {
                let (x, kernel) = (ins[0], ins[1]);
                let [n, c, h, w] = *self.value(x).shape() else { unreachable!() };
                let [co, _, kh, kw] = *self.value(kernel).shape() else { unreachable!() };
                let [_, _, oh, ow] = *node.value.shape() else { unreachable!() };
                let (ohw, ckk) = (oh * ow, c * kh * kw);
                if self.wants(kernel) {
                    let chunks = GRAD_CHUNKS.min(n);
                    let per = n.div_ceil(chunks);
                    let partials: Vec<Vec<f64>> = (0..chunks)
                        .into_par_iter()
                        .map(|ci| {
                            let mut acc = vec![0.0; co * ckk];
                            for i in ci * per..((ci + 1) * per).min(n) {
                                matmul_bt_acc(
                                    &dyd[i * co * ohw..(i + 1) * co * ohw],
                                    &cols[i * ckk * ohw..(i + 1) * ckk * ohw],
                                    &mut acc,
                                    co,
                                    ohw,
                                    ckk,
                                );
                            }
                            acc
                        })
                        .collect();
                    let mut dk = vec![0.0; co * ckk];
                    for p in &partials {
                        for (d, s) in dk.iter_mut().zip(p) {
                            *d += s;
                        }
                    }
                    self.accumulate(grads, kernel, Tensor::new(vec![co, c, kh, kw], dk)?);
                }
                if self.wants(x) {
                    let kd = self.value(kernel).data();
                    let mut dx = vec![0.0; n * c * h * w];
                    dx.par_chunks_mut(c * h * w).enumerate().for_each(|(i, dxn)| {
                        let mut dcols = vec![0.0; ckk * ohw];
                        matmul_at_acc(kd, &dyd[i * co * ohw..(i + 1) * co * ohw], &mut dcols, ckk, co, ohw);
                        col2im(&dcols, c, h, w, kh, kw, *stride, *pad, oh, ow, dxn);
                    });
                    self.accumulate(grads, x, Tensor::new(vec![n, c, h, w], dx)?);
                }
            }
            Op::InstanceNorm { xhat, inv_std } => {
                let (x, gamma, beta) = (ins[0], ins[1], ins[2]);
                let [n, c, h, w] = *self.value(x).shape() else { unreachable!() };
                let hw = h * w;
                let gd = self.value(gamma).data();
                self.norm_affine_grads(grads, gamma, beta, dyd, xhat, n, c, hw, true);
                if self.wants(x) {
                    let mut dx = vec![0.0; n * c * hw];
                    for g in 0..n * c {
                        let gc = gd[g % c];
                        let r = inv_std[g];
                        group_norm_backward(
                            &dyd[g * hw..(g + 1) * hw],
                            &xhat[g * hw..(g + 1) * hw],
                            gc,
                            r,
                            &mut dx[g * hw..(g + 1) * hw],
                        );
                    }
                    self.accumulate(grads, x, Tensor::new(vec![n, c, h, w], dx)?);
                }
            }
            Op::BatchNormTrain { xhat, inv_std } => {
                let (x, gamma, beta) = (ins[0], ins[1], ins[2]);
                let [n, c, h, w] = *self.value(x).shape() else { unreachable!() };
                let hw = h * w;
                let gd = self.value(gamma).data();
                self.norm_affine_grads(grads, gamma, beta, dyd, xhat, n, c, hw, true);
                if self.wants(x) {
                    // gather each channel's strided group, run the dense-group
                    // backward, scatter back
                    let gsize = n * hw;
                    let mut dx = vec![0.0; n * c * hw];
                    let mut dyg = vec![0.0; gsize];
                    let mut xhg = vec![0.0; gsize];
                    let mut dxg = vec![0.0; gsize];
                    for ch in 0..c {
                        for ni in 0..n {
                            let base = (ni * c + ch) * hw;
                            dyg[ni * hw..(ni + 1) * hw].copy_from_slice(&dyd[base..base + hw]);
                            xhg[ni * hw..(ni + 1) * hw].copy_from_slice(&xhat[base..base + hw]);
                        }
                        dxg.fill(0.0);
                        group_norm_backward(&dyg, &xhg, gd[ch], inv_std[ch], &mut dxg);
                        for ni in 0..n {
                            let base = (ni * c + ch) * hw;
                            dx[base..base + hw].copy_from_slice(&dxg[ni * hw..(ni + 1) * hw]);
                        }
                    }
                    self.accumulate(grads, x, Tensor::new(vec![n, c, h, w], dx)?);
                }
            }
            Op::BatchNormEval { xhat, inv_std } => {
                let (x, gamma, beta) = (ins[0], ins[1], ins[2]);
                let [n, c, h, w] = *self.value(x).shape() else { unreachable!() };
                let hw = h * w;
                let gd = self.value(gamma).data();
                self.norm_affine_grads(grads, gamma, beta, dyd, xhat, n, c, hw, true);
                if self.wants(x) {
                    let mut dx = vec![0.0; n * c * hw];
                    for (g, chunk) in dx.chunks_mut(hw).enumerate() {
                        let ch = g % c;
                        let scale = gd[ch] * inv_std[ch];
                        for (i, d) in chunk.iter_mut().enumerate() {
                            *d = dyd[g * hw + i] * scale;
                        }
                    }
                    self.accumulate(grads, x, Tensor::new(vec![n, c, h, w], dx)?);
                }
            }
            Op::Relu => {
                let x = ins[0];
                if self.wants(x) {
                    let yd = node.value.data();
                    let dx: Vec<f64> = dyd.iter().zip(yd).map(|(d, y)| if *y > 0.0 { *d } else { 0.0 }).collect();
                    self.accumulate(grads, x, Tensor::new(node.value.shape().to_vec(), dx)?);
                }
            }
            Op::Sigmoid => {
                let x = ins[0];
                if self.wants(x) {
                    let yd = node.value.data();
                    let dx: Vec<f64> = dyd.iter().zip(yd).map(|(d, y)| d * y * (1.0 - y)).collect();
                    self.accumulate(grads, x, Tensor::new(node.value.shape().to_vec(), dx)?);
                }
            }
            Op::Add => {
                for &i in &ins[..2] {
                    if self.wants(i) {
                        self.accumulate(grads, i, dy.clone());
                    }
                }
            }
            Op::Sub => {
                if self.wants(ins[0]) {
                    self.accumulate(grads, ins[0], dy.clone());
                }
                if self.wants(ins[1]) {
                    let neg: Vec<f64> = dyd.iter().map(|v| -v).collect();
                    self.accumulate(grads, ins[1], Tensor::new(dy.shape().to_vec(), neg)?);
                }
            }
            Op::Mul => {
                let (a, b) = (ins[0], ins[1]);
                if self.wants(a) {
                    let bd = self.value(b).data();
                    let da: Vec<f64> = dyd.iter().zip(bd).map(|(d, v)| d * v).collect();
                    self.accumulate(grads, a, Tensor::new(dy.shape().to_vec(), da)?);
                }
                if self.wants(b) {
                    let ad = self.value(a).data();
                    let db: Vec<f64> = dyd.iter().zip(ad).map(|(d, v)| d * v).collect();
                    self.accumulate(grads, b, Tensor::new(dy.shape().to_vec(), db)?);
                }
            }
            Op::Affine { mul } => {
                if self.wants(ins[0]) {
                    let dx: Vec<f64> = dyd.iter().map(|v| v * mul).collect();
                    self.accumulate(grads, ins[0], Tensor::new(dy.shape().to_vec(), dx)?);
                }
            }
            Op::MulScalarNode => {
                let (x, s) = (ins[0], ins[1]);
                let sv = self.value(s).data()[0];
                if self.wants(x) {
                    let dx: Vec<f64> = dyd.iter().map(|v| v * sv).collect();
                    self.accumulate(grads, x, Tensor::new(dy.shape().to_vec(), dx)?);
                }
                if self.wants(s) {
                    let xd = self.value(x).data();
                    let ds: f64 = dyd.iter().zip(xd).map(|(d, v)| d * v).sum();
                    self.accumulate(grads, s, Tensor::new(self.value(s).shape().to_vec(), vec![ds])?);
                }
            }
            Op::MatMul => {
                let (a, b) = (ins[0], ins[1]);
                let [r, k] = *self.value(a).shape() else { unreachable!() };
                let [_, s] = *self.value(b).shape() else { unreachable!() };
                if self.wants(a) {
                    let da = matmul_bt(dyd, self.value(b).data(), r, s, k);
                    self.accumulate(grads, a, Tensor::new(vec![r, k], da)?);
                }
                if self.wants(b) {
                    let db = matmul_at(self.value(a).data(), dyd, k, r, s);
                    self.accumulate(grads, b, Tensor::new(vec![k, s], db)?);
                }
            }
            Op::MatMulBT => {
                let (a, b) = (ins[0], ins[1]);
                let [r, k] = *self.value(a).shape() else { unreachable!() };
                let [s, _] = *self.value(b).shape() else { unreachable!() };
                if self.wants(a) {
                    let da = matmul(dyd, self.value(b).data(), r, s, k);
                    self.accumulate(grads, a, Tensor::new(vec![r, k], da)?);
                }
                if self.wants(b) {
                    let db = matmul_at(dyd, self.value(a).data(), s, r, k);
                    self.accumulate(grads, b, Tensor::new(vec![s, k], db)?);
                }
            }
            Op::BatchMatMul => {
                let (a, b) = (ins[0], ins[1]);
                let [n, r, k] = *self.value(a).shape() else { unreachable!() };
                let [_, _, s] = *self.value(b).shape() else { unreachable!() };
                let ad = self.value(a).data();
                let bd = self.value(b).data();
                if self.wants(a) {
                    let mut da = vec![0.0; n * r * k];
                    da.par_chunks_mut(r * k).enumerate().for_each(|(i, dan)| {
                        matmul_bt_acc(&dyd[i * r * s..(i + 1) * r * s], &bd[i * k * s..(i + 1) * k * s], dan, r, s, k);
                    });
                    self.accumulate(grads, a, Tensor::new(vec![n, r, k], da)?);
                }
                if self.wants(b) {
                    let mut db = vec![0.0; n * k * s];
                    db.par_chunks_mut(k * s).enumerate().for_each(|(i, dbn)| {
                        matmul_at_acc(&ad[i * r * k..(i + 1) * r * k], &dyd[i * r * s..(i + 1) * r * s], dbn, k, r, s);
                    });
                    self.accumulate(grads, b, Tensor::new(vec![n, k, s], db)?);
                }
            }
            Op::BatchMatMulBT => {
                let (a, b) = (ins[0], ins[1]);
                let [n, r, k] = *self.value(a).shape() else { unreachable!() };
                let [_, s, _] = *self.value(b).shape() else { unreachable!() };
                let ad = self.value(a).data();
                let bd = self.value(b).data();
                if self.wants(a) {
                    let mut da = vec![0.0; n * r * k];
                    da.par_chunks_mut(r * k).enumerate().for_each(|(i, dan)| {
                        matmul_acc(&dyd[i * r * s..(i + 1) * r * s], &bd[i * s * k..(i + 1) * s * k], dan, r, s, k);
                    });
                    self.accumulate(grads, a, Tensor::new(vec![n, r, k], da)?);
                }
                if self.wants(b) {
                    let mut db = vec![0.0; n * s * k];
                    db.par_chunks_mut(s * k).enumerate().for_each(|(i, dbn)| {
                        matmul_at_acc(&dyd[i * r * s..(i + 1) * r * s], &ad[i * r * k..(i + 1) * r * k], dbn, s, r, k);
                    });
                    self.accumulate(grads, b, Tensor::new(vec![n, s, k], db)?);
                }
            }
            Op::Linear => {
                let (x, w, b) = (ins[0], ins[1], ins[2]);
                let [bs, d] = *self.value(x).shape() else { unreachable!() };
                let [c, _] = *self.value(w).shape() else { unreachable!() };
                if self.wants(x) {
                    let dx = matmul(dyd, self.value(w).data(), bs, c, d);
                    self.accumulate(grads, x, Tensor::new(vec![bs, d], dx)?);
                }
                if self.wants(w) {
                    let dw = matmul_at(dyd, self.value(x).data(), c, bs, d);
                    self.accumulate(grads, w, Tensor::new(vec![c, d], dw)?);
                }
                if self.wants(b) {
                    let mut db = vec![0.0; c];
                    for row in dyd.chunks(c) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    self.accumulate(grads, b, Tensor::new(vec![c], db)?);
                }
            }
            Op::Gap => {
                let x = ins[0];
                if self.wants(x) {
                    let [n, c, h, w] = *self.value(x).shape() else { unreachable!() };
                    let hw = (h * w) as f64;
                    let mut dx = vec![0.0; n * c * h * w];
                    for (g, chunk) in dx.chunks_mut(h * w).enumerate() {
                        chunk.fill(dyd[g] / hw);
                    }
                    self.accumulate(grads, x, Tensor::new(vec![n, c, h, w], dx)?);
                }
            }
            Op::AvgPoolTo => {
                let x = ins[0];
                if self.wants(x) {
                    let [n, c, h, w] = *self.value(x).shape() else { unreachable!() };
                    let [_, _, oh, ow] = *node.value.shape() else { unreachable!() };
                    let (wy, wx) = (h / oh, w / ow);
                    let win = (wy * wx) as f64;
                    let mut dx = vec![0.0; n * c * h * w];
                    for g in 0..n * c {
                        let ds = &dyd[g * oh * ow..(g + 1) * oh * ow];
                        let xs = &mut dx[g * h * w..(g + 1) * h * w];
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let v = ds[oy * ow + ox] / win;
                                for dyw in 0..wy {
                                    for dxw in 0..wx {
                                        xs[(oy * wy + dyw) * w + ox * wx + dxw] += v;
                                    }
                                }
                            }
                        }
                    }
                    self.accumulate(grads, x, Tensor::new(vec![n, c, h, w], dx)?);
                }
            }
            Op::SliceC { from } => {
                let x = ins[0];
                if self.wants(x) {
                    let [n, c, h, w] = *self.value(x).shape() else { unreachable!() };
                    let [_, cs, _, _] = *node.value.shape() else { unreachable!() };
                    let hw = h * w;
                    let mut dx = vec![0.0; n * c * hw];
                    for ni in 0..n {
                        let dst = &mut dx[(ni * c + from) * hw..(ni * c + from + cs) * hw];
                        dst.copy_from_slice(&dyd[ni * cs * hw..(ni + 1) * cs * hw]);
                    }
                    self.accumulate(grads, x, Tensor::new(vec![n, c, h, w], dx)?);
                }
            }
            Op::ConcatC => {
                let (a, b) = (ins[0], ins[1]);
                let [n, ca, h, w] = *self.value(a).shape() else { unreachable!() };
                let [_, cb, _, _] = *self.value(b).shape() else { unreachable!() };
                let hw = h * w;
                if self.wants(a) {
                    let mut da = vec![0.0; n * ca * hw];
                    for ni in 0..n {
                        let src = &dyd[ni * (ca + cb) * hw..ni * (ca + cb) * hw + ca * hw];
                        da[ni * ca * hw..(ni + 1) * ca * hw].copy_from_slice(src);
                    }
                    self.accumulate(grads, a, Tensor::new(vec![n, ca, h, w], da)?);
                }
                if self.wants(b) {
                    let mut db = vec![0.0; n * cb * hw];
                    for ni in 0..n {
                        let start = ni * (ca + cb) * hw + ca * hw;
                        db[ni * cb * hw..(ni + 1) * cb * hw].copy_from_slice(&dyd[start..start + cb * hw]);
                    }
                    self.accumulate(grads, b, Tensor::new(vec![n, cb, h, w], db)?);
                }
            }
            Op::MulChanNC => {
                let (x, a) = (ins[0], ins[1]);
                let [n, c, h, w] = *self.value(x).shape() else { unreachable!() };
                let hw = h * w;
                if self.wants(x) {
                    let ad = self.value(a).data();
                    let mut dx = vec![0.0; n * c * hw];
                    for (g, chunk) in dx.chunks_mut(hw).enumerate() {
                        for (i, d) in chunk.iter_mut().enumerate() {
                            *d = dyd[g * hw + i] * ad[g];
                        }
                    }
                    self.accumulate(grads, x, Tensor::new(vec![n, c, h, w], dx)?);
                }
                if self.wants(a) {
                    let xd = self.value(x).data();
                    let mut da = vec![0.0; n * c];
                    for (g, d) in da.iter_mut().enumerate() {
                        for i in 0..hw {
                            *d += dyd[g * hw + i] * xd[g * hw + i];
                        }
                    }
                    self.accumulate(grads, a, Tensor::new(vec![n, c], da)?);
                }
            }
            Op::AddChanC => {
                let (x, b) = (ins[0], ins[1]);
                let [n, c, h, w] = *self.value(x).shape() else { unreachable!() };
                let hw = h * w;
                if self.wants(x) {
                    self.accumulate(grads, x, Tensor::new(vec![n, c, h, w], dyd.to_vec())?);
                }
                if self.wants(b) {
                    let mut db = vec![0.0; c];
                    for g in 0..n * c {
                        let dv = &mut db[g % c];
                        for i in 0..hw {
                            *dv += dyd[g * hw + i];
                        }
                    }
                    self.accumulate(grads, b, Tensor::new(vec![c], db)?);
                }
            }
            Op::NormalizeRows { inv_norm } => {
                let x = ins[0];
                if self.wants(x) {
                    let xd = self.value(x).data();
                    let cols = *node.value.shape().last().expect("rank ≥ 1");
                    let mut dx = vec![0.0; xd.len()];
                    for (r, &inv) in inv_norm.iter().enumerate() {
                        let xs = &xd[r * cols..(r + 1) * cols];
                        let ds = &dyd[r * cols..(r + 1) * cols];
                        let dot: f64 = xs.iter().zip(ds).map(|(a, b)| a * b).sum();
                        let i3 = inv * inv * inv;
                        for i in 0..cols {
                            dx[r * cols + i] = inv * ds[i] - i3 * dot * xs[i];
                        }
                    }
                    self.accumulate(grads, x, Tensor::new(self.value(x).shape().to_vec(), dx)?);
                }
            }
            Op::SoftmaxRows => {
                let x = ins[0];
                if self.wants(x) {
                    let yd = node.value.data();
                    let cols = *node.value.shape().last().expect("rank ≥ 1");
                    let rows = yd.len() / cols;
                    let mut dx = vec![0.0; yd.len()];
                    for r in 0..rows {
                        let ys = &yd[r * cols..(r + 1) * cols];
                        let ds = &dyd[r * cols..(r + 1) * cols];
                        let s: f64 = ys.iter().zip(ds).map(|(y, d)| y * d).sum();
                        for i in 0..cols {
                            dx[r * cols + i] = ys[i] * (ds[i] - s);
                        }
                    }
                    self.accumulate(grads, x, Tensor::new(self.value(x).shape().to_vec(), dx)?);
                }
            }
            Op::Diag => {
                let x = ins[0];
                if self.wants(x) {
                    let [r, c] = *self.value(x).shape() else { unreachable!() };
                    let mut dx = vec![0.0; r * c];
                    for i in 0..r {
                        dx[i * c + i] = dyd[i];
                    }
                    self.accumulate(grads, x, Tensor::new(vec![r, c], dx)?);
                }
            }
            Op::MulRowVec => {
                let (x, v) = (ins[0], ins[1]);
                let [b, c] = *self.value(x).shape() else { unreachable!() };
                if self.wants(x) {
                    let vd = self.value(v).data();
                    let dx: Vec<f64> = dyd.iter().enumerate().map(|(i, d)| d * vd[i % c]).collect();
                    self.accumulate(grads, x, Tensor::new(vec![b, c], dx)?);
                }
                if self.wants(v) {
                    let xd = self.value(x).data();
                    let mut dv = vec![0.0; c];
                    for (i, d) in dyd.iter().enumerate() {
                        dv[i % c] += d * xd[i];
                    }
                    self.accumulate(grads, v, Tensor::new(vec![c], dv)?);
                }
            }
            Op::SumRows => {
                let x = ins[0];
                if self.wants(x) {
                    let [b, c] = *self.value(x).shape() else { unreachable!() };
                    let mut dx = vec![0.0; b * c];
                    for (i, chunk) in dx.chunks_mut(c).enumerate() {
                        chunk.fill(dyd[i]);
                    }
                    self.accumulate(grads, x, Tensor::new(vec![b, c], dx)?);
                }
            }
            Op::MeanAxis0 => {
                let x = ins[0];
                if self.wants(x) {
                    let [b, c] = *self.value(x).shape() else { unreachable!() };
                    let mut dx = vec![0.0; b * c];
                    for chunk in dx.chunks_mut(c) {
                        for (d, g) in chunk.iter_mut().zip(dyd) {
                            *d = g / b as f64;
                        }
                    }
                    self.accumulate(grads, x, Tensor::new(vec![b, c], dx)?);
                }
            }
            Op::MeanAll => {
                let x = ins[0];
                if self.wants(x) {
                    let n = self.value(x).numel();
                    let v = dyd[0] / n as f64;
                    self.accumulate(grads, x, Tensor::full(self.value(x).shape(), v));
                }
            }
            Op::Reshape => {
                let x = ins[0];
                if self.wants(x) {
                    self.accumulate(grads, x, dy.reshape(self.value(x).shape())?);
                }
            }
            Op::CeMean { labels, probs } => {
                let x = ins[0];
                if self.wants(x) {
                    let [b, m] = *self.value(x).shape() else { unreachable!() };
                    let g = dyd[0] / b as f64;
                    let mut dx = probs.clone();
                    for (i, &l) in labels.iter().enumerate() {
                        dx[i * m + l] -= 1.0;
                    }
                    for d in dx.iter_mut() {
                        *d *= g;
                    }
                    self.accumulate(grads, x, Tensor::new(vec![b, m], dx)?);
                }
            }
            Op::BatchHardTriplet { terms, valid } => {
                let emb = ins[0];
                if self.wants(emb) {
                    let [b, d] = *self.value(emb).shape() else { unreachable!() };
                    let xd = self.value(emb).data();
                    let g = dyd[0] / *valid as f64;
                    let mut dx = vec![0.0; b * d];
                    for t in terms.iter().filter(|t| t.active) {
                        if t.dap > 0.0 {
                            let s = g / t.dap;
                            for j in 0..d {
                                let diff = (xd[t.anchor * d + j] - xd[t.pos * d + j]) * s;
                                dx[t.anchor * d + j] += diff;
                                dx[t.pos * d + j] -= diff;
                            }
                        }
                        if t.dan > 0.0 {
                            let s = g / t.dan;
                            for j in 0..d {
                                let diff = (xd[t.anchor * d + j] - xd[t.neg * d + j]) * s;
                                dx[t.anchor * d + j] -= diff;
                                dx[t.neg * d + j] += diff;
                            }
                        }
                    }
                    self.accumulate(grads, emb, Tensor::new(vec![b, d], dx)?);
                }
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn norm_affine_grads(
        &self,
        grads: &mut [Option<Tensor>],
        gamma: NodeId,
        beta: NodeId,
        dyd: &[f64],
        xhat: &[f64],
        n: usize,
        c: usize,
        hw: usize,
        per_channel: bool,
    ) {
        debug_assert!(per_channel);
        if self.wants(gamma) {
            let mut dg = vec![0.0; c];
            for g in 0..n * c {
                let ch = g % c;
                for i in 0..hw {
                    dg[ch] += dyd[g * hw + i] * xhat[g * hw + i];
                }
            }
            self.accumulate(grads, gamma, Tensor::from_vec(dg));
        }
        if self.wants(beta) {
            let mut db = vec![0.0; c];
            for g in 0..n * c {
                let ch = g % c;
                for i in 0..hw {
                    db[ch] += dyd[g * hw + i];
                }
            }
            self.accumulate(grads, beta, Tensor::from_vec(db));
        }
    }
}

/// dx for y = γ·x̂ + β over one normalization group, batch statistics:
/// dx = γ·r·(dy − mean(dy) − x̂·mean(dy·x̂)).
fn group_norm_backward(dy: &[f64], xhat: &[f64], gamma: f64, inv_std: f64, dx: &mut [f64]) {
    let g = dy.len() as f64;
    let mut sum_dy = 0.0;
    let mut sum_dyxh = 0.0;
    for (d, xh) in dy.iter().zip(xhat) {
        sum_dy += d;
        sum_dyxh += d * xh;
    }
    let (m1, m2) = (sum_dy / g, sum_dyxh / g);
    let s = gamma * inv_std;
    for i in 0..dy.len() {
        dx[i] = s * (dy[i] - m1 - xhat[i] * m2);
    }
}

#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f64],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    cols: &mut [f64],
) {
    let ohw = oh * ow;
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let dst = &mut cols[row * ohw..(row + 1) * ohw];
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        dst[oy * ow..(oy + 1) * ow].fill(0.0);
                        continue;
                    }
                    let base = (ci * h + iy as usize) * w;
                    for ox in 0..ow {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        dst[oy * ow + ox] =
                            if ix < 0 || ix >= w as isize { 0.0 } else { x[base + ix as usize] };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    cols: &[f64],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    dx: &mut [f64],
) {
    let ohw = oh * ow;
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let src = &cols[row * ohw..(row + 1) * ohw];
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = (ci * h + iy as usize) * w;
                    for ox in 0..ow {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dx[base + ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn conv_identity_kernel_passes_input_through() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[1, 1, 3, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]), false);
        let k = g.leaf(t(&[1, 1, 1, 1], &[1.0]), false);
        let y = g.conv2d(x, k, 1, 0).unwrap();
        assert_eq!(g.value(y).data(), g.value(x).data());
    }

    #[test]
    fn conv_hand_cross_correlation() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]), false);
        let k = g.leaf(t(&[1, 1, 2, 2], &[1.0, 0.0, 0.0, 1.0]), false);
        let y = g.conv2d(x, k, 1, 0).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 1, 1, 1]);
        assert_abs_diff_eq!(g.value(y).item(), 5.0);
    }

    #[test]
    fn conv_zero_input_zero_output() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[2, 3, 5, 5]), false);
        let k = g.leaf(t(&[4, 3, 3, 3], &vec![0.7; 4 * 3 * 9]), false);
        let y = g.conv2d(x, k, 2, 1).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[1, 3, 4, 4]), false);
        let k = g.leaf(Tensor::zeros(&[2, 4, 3, 3]), false);
        let err = g.conv2d(x, k, 1, 1).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[1, 3, 4, 4]") && msg.contains("[2, 4, 3, 3]"), "{msg}");
    }

    #[test]
    fn instance_norm_constant_channel_collapses_to_zero() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::full(&[1, 1, 2, 2], 7.0), false);
        let gamma = g.leaf(Tensor::full(&[1], 1.0), false);
        let beta = g.leaf(Tensor::zeros(&[1]), false);
        let y = g.instance_norm(x, gamma, beta, NORM_EPS).unwrap();
        for &v in g.value(y).data() {
            assert_abs_diff_eq!(v, 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn instance_norm_standardizes_each_channel() {
        let mut rng = crate::rng::Rng::new(5);
        let data: Vec<f64> = (0..2 * 3 * 4 * 4).map(|_| rng.normal() * 3.0 + 1.5).collect();
        let mut g = Graph::new();
        let x = g.leaf(t(&[2, 3, 4, 4], &data), false);
        let gamma = g.leaf(Tensor::full(&[3], 1.0), false);
        let beta = g.leaf(Tensor::zeros(&[3]), false);
        let y = g.instance_norm(x, gamma, beta, 1e-9).unwrap();
        let yd = g.value(y).data();
        for grp in 0..6 {
            let vals = &yd[grp * 16..(grp + 1) * 16];
            let mean = vals.iter().sum::<f64>() / 16.0;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-6, "group {grp} mean {mean}");
            assert!((var - 1.0).abs() < 1e-4, "group {grp} var {var}");
        }
    }

    #[test]
    fn batch_norm_two_value_channel() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2, 1, 1, 1], &[0.0, 2.0]), false);
        let gamma = g.leaf(Tensor::full(&[1], 1.0), false);
        let beta = g.leaf(Tensor::zeros(&[1]), false);
        let (y, stats) = g.batch_norm_train(x, gamma, beta, 1e-12).unwrap();
        let yd = g.value(y).data();
        assert_abs_diff_eq!(yd[0], -1.0, epsilon = 1e-5);
        assert_abs_diff_eq!(yd[1], 1.0, epsilon = 1e-5);
        assert_abs_diff_eq!(stats.mean[0], 1.0);
        assert_abs_diff_eq!(stats.var[0], 1.0);
    }

    #[test]
    fn batch_norm_constant_batch_zeros() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::full(&[3, 2, 2, 2], 4.2), false);
        let gamma = g.leaf(Tensor::full(&[2], 1.0), false);
        let beta = g.leaf(Tensor::zeros(&[2]), false);
        let (y, _) = g.batch_norm_train(x, gamma, beta, NORM_EPS).unwrap();
        for &v in g.value(y).data() {
            assert_abs_diff_eq!(v, 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn batch_norm_eval_uses_running_stats() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[1, 1, 1, 2], &[3.0, 5.0]), false);
        let gamma = g.leaf(Tensor::full(&[1], 2.0), false);
        let beta = g.leaf(Tensor::full(&[1], 1.0), false);
        let y = g.batch_norm_eval(x, gamma, beta, &[3.0], &[4.0], 1e-12).unwrap();
        let yd = g.value(y).data();
        assert_abs_diff_eq!(yd[0], 1.0, epsilon = 1e-9); // 2·(3−3)/2 + 1
        assert_abs_diff_eq!(yd[1], 3.0, epsilon = 1e-9); // 2·(5−3)/2 + 1
    }

    #[test]
    fn gap_examples() {
        let mut g = Graph::new();
        let ones = g.leaf(Tensor::full(&[1, 1, 2, 2], 1.0), false);
        let y = g.global_avg_pool(ones).unwrap();
        assert_abs_diff_eq!(g.value(y).item(), 1.0);
        let x = g.leaf(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]), false);
        let y = g.global_avg_pool(x).unwrap();
        assert_abs_diff_eq!(g.value(y).item(), 2.5);
    }

    #[test]
    fn softmax_rows_examples() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[1, 4], &[0.0; 4]), false);
        let y = g.softmax_rows(x, None).unwrap();
        for &v in g.value(y).data() {
            assert_abs_diff_eq!(v, 0.25, epsilon = 1e-12);
        }
        let x = g.leaf(t(&[1, 2], &[0.0, 0.0]), false);
        let y = g.softmax_rows(x, Some(&[false, true])).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 0.0]);
        let x = g.leaf(t(&[1, 2], &[1000.0, 1000.0]), false);
        let y = g.softmax_rows(x, None).unwrap();
        assert_abs_diff_eq!(g.value(y).data()[0], 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(g.value(y).data()[1], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one_with_masks() {
        let mut rng = crate::rng::Rng::new(8);
        let data: Vec<f64> = (0..5 * 7).map(|_| rng.normal() * 4.0).collect();
        let mask: Vec<bool> = (0..5 * 7).map(|i| i % 3 == 0).collect();
        let mut g = Graph::new();
        let x = g.leaf(t(&[5, 7], &data), false);
        let y = g.softmax_rows(x, Some(&mask)).unwrap();
        let yd = g.value(y).data();
        for r in 0..5 {
            let row = &yd[r * 7..(r + 1) * 7];
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-9, "row {r} sums to {s}");
            for i in 0..7 {
                if mask[r * 7 + i] {
                    assert_eq!(row[i], 0.0);
                }
            }
        }
    }

    #[test]
    fn softmax_rows_rejects_fully_masked_row() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[1, 2], &[1.0, 2.0]), false);
        assert!(g.softmax_rows(x, Some(&[true, true])).is_err());
    }

    #[test]
    fn ce_mean_uniform_logits() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[2, 4]), true);
        let l = g.ce_mean(x, &[0, 3]).unwrap();
        assert_abs_diff_eq!(g.value(l).item(), 4.0f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn triplet_hand_example() {
        // 1-D embeddings {0, 1} labeled A and {1.2} labeled B, margin 0.3
        let mut g = Graph::new();
        let e = g.leaf(t(&[3, 1], &[0.0, 1.0, 1.2]), true);
        let l = g.batch_hard_triplet(e, &[0, 0, 1], 0.3).unwrap();
        assert_abs_diff_eq!(g.value(l).item(), 0.6, epsilon = 1e-12);
    }

    #[test]
    fn triplet_well_separated_is_zero() {
        let mut g = Graph::new();
        let e = g.leaf(t(&[3, 1], &[0.0, 1.0, 5.0]), true);
        let l = g.batch_hard_triplet(e, &[0, 0, 1], 0.3).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
    }

    #[test]
    fn triplet_degenerate_identical_embeddings() {
        let mut g = Graph::new();
        let e = g.leaf(Tensor::zeros(&[4, 2]), true);
        let l = g.batch_hard_triplet(e, &[0, 0, 1, 1], 0.7).unwrap();
        assert_abs_diff_eq!(g.value(l).item(), 0.7, epsilon = 1e-12);
    }

    #[test]
    fn triplet_rejects_degenerate_batches() {
        let mut g = Graph::new();
        let e = g.leaf(Tensor::zeros(&[2, 2]), true);
        assert!(g.batch_hard_triplet(e, &[0, 1], 0.3).is_err()); // no id with 2 instances
        let e2 = g.leaf(Tensor::zeros(&[3, 2]), true);
        assert!(g.batch_hard_triplet(e2, &[0, 0, 0], 0.3).is_err()); // single identity
    }

    #[test]
    fn gap_gradient_distributes_evenly() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]), true);
        let y = g.global_avg_pool(x).unwrap();
        let m = g.mean_all(y).unwrap();
        let grads = g.backward(m).unwrap();
        for &v in grads.get(x).unwrap().data() {
            assert_abs_diff_eq!(v, 0.25, epsilon = 1e-12);
        }
    }

    #[test]
    fn backward_accumulates_across_reuse() {
        // y = mean(x ⊙ x): dy/dx = 2x/numel
        let mut g = Graph::new();
        let x = g.leaf(t(&[1, 3], &[1.0, -2.0, 0.5]), true);
        let y = g.mul(x, x).unwrap();
        let m = g.mean_all(y).unwrap();
        let grads = g.backward(m).unwrap();
        let gx = grads.get(x).unwrap().data();
        for (gv, xv) in gx.iter().zip([1.0, -2.0, 0.5]) {
            assert_abs_diff_eq!(gv, &(2.0 * xv / 3.0), epsilon = 1e-12);
        }
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[1, 3], &[1.0, 2.0, 3.0]), true);
        let y = g.relu(x).unwrap();
        assert!(g.backward(y).is_err());
    }

    #[test]
    fn constant_subgraphs_get_no_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[1, 2], &[1.0, 2.0]), true);
        let c = g.constant(t(&[1, 2], &[3.0, 4.0]));
        let y = g.mul(x, c).unwrap();
        let m = g.mean_all(y).unwrap();
        let grads = g.backward(m).unwrap();
        assert!(grads.get(c).is_none());
        assert!(grads.get(x).is_some());
    }
}
