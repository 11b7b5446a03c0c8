//! Tape-based reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order and the backward sweep simply walks it in reverse.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::diffcore::params::ParameterSet;
use crate::diffcore::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

/// Batchnorm variance floor.
pub const BN_EPS: f64 = 1e-5;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "slope", rename_all = "snake_case")]
pub enum Activation {
    Linear,
    Relu,
    LeakyRelu(f64),
    Sigmoid,
    Tanh,
    /// Row-wise over the last axis.
    Softmax,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[derive(Debug)]
enum Op {
    Leaf,
    Dense { x: Var, w: Var, b: Var },
    Conv1d { x: Var, k: Var, b: Var, dilation: usize, cols: Vec<f64> },
    MaxPool { x: Var, argmax: Vec<usize> },
    Upsample { x: Var, factor: usize },
    CropTime { x: Var },
    Reshape { x: Var },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64>, train: bool },
    Dropout { x: Var, mask: Vec<f64> },
    Act { x: Var, kind: Activation },
    Softmax { x: Var },
    Exp { x: Var },
    Square { x: Var },
    Softplus { x: Var },
    Log { x: Var, floor: f64 },
    Scale { x: Var, c: f64 },
    AddScalar { x: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Concat { parts: Vec<Var> },
    SliceCols { x: Var, start: usize },
    Sum { x: Var },
    Mean { x: Var },
    PickRows { x: Var, idx: Vec<usize> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Dense { .. } => "dense",
            Op::Conv1d { .. } => "conv1d",
            Op::MaxPool { .. } => "maxpool1d",
            Op::Upsample { .. } => "upsample1d",
            Op::CropTime { .. } => "crop_time",
            Op::Reshape { .. } => "reshape",
            Op::BatchNorm { .. } => "batchnorm",
            Op::Dropout { .. } => "dropout",
            Op::Act { .. } => "activation",
            Op::Softmax { .. } => "softmax",
            Op::Exp { .. } => "exp",
            Op::Square { .. } => "square",
            Op::Softplus { .. } => "softplus",
            Op::Log { .. } => "log",
            Op::Scale { .. } => "scale",
            Op::AddScalar { .. } => "add_scalar",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::Concat { .. } => "concat",
            Op::SliceCols { .. } => "slice_cols",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::PickRows { .. } => "pick_rows",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    binding: Option<(u64, usize)>,
    label: Option<String>,
}

/// Result of a backward pass.
#[derive(Debug, Default)]
pub struct Gradients {
    params: HashMap<(u64, usize), Tensor>,
    leaves: HashMap<usize, Tensor>,
}

impl Gradients {
    pub fn for_param(&self, set_id: u64, index: usize) -> Option<&Tensor> {
        self.params.get(&(set_id, index))
    }

    /// Gradient with respect to an input leaf.
    pub fn wrt(&self, var: Var) -> Option<&Tensor> {
        self.leaves.get(&var.0)
    }
}

/// Batch statistics computed by a training-mode batchnorm node.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: usize,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    backward_done: bool,
}

fn shape_err(msg: String) -> Error {
    Error::Shape(msg)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
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

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    /// Attaches a human-readable label used in numeric error reports.
    pub fn set_label(&mut self, v: Var, label: impl Into<String>) {
        self.nodes[v.0].label = Some(label.into());
    }

    fn describe(&self, index: usize) -> String {
        let node = &self.nodes[index];
        match &node.label {
            Some(l) => format!("{} '{}' (node {})", node.op.name(), l, index),
            None => format!("{} (node {})", node.op.name(), index),
        }
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        let index = self.nodes.len();
        if !value.all_finite() {
            return Err(Error::numeric(
                format!("{} (node {index})", op.name()),
                "non-finite forward value",
            ));
        }
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            binding: None,
            label: None,
        });
        Ok(Var(index))
    }

    fn leaf(&mut self, value: Tensor, needs_grad: bool, binding: Option<(u64, usize)>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad,
            binding,
            label: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf whose gradient is reported by [`Gradients::wrt`].
    pub fn input(&mut self, value: Tensor) -> Var {
        self.leaf(value, true, None)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false, None)
    }

    /// Leaf bound to parameter `index` of `params`.
    pub fn param(&mut self, params: &ParameterSet, index: usize) -> Var {
        let p = params.get(index);
        let v = self.leaf(p.value.clone(), p.trainable, Some((params.id(), index)));
        self.nodes[v.0].label = Some(p.name.clone());
        v
    }

    /// Copy of `v`'s value as a constant: gradients stop here.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.value(x).shape(), self.value(w).shape(), self.value(b).shape());
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] || bs != [ws[1]] {
            return Err(shape_err(format!(
                "dense: x {xs:?}, weights {ws:?}, bias {bs:?}"
            )));
        }
        let (batch, inp, out) = (xs[0], ws[0], ws[1]);
        let mut y = Vec::with_capacity(batch * out);
        for _ in 0..batch {
            y.extend_from_slice(self.value(b).data());
        }
        gemm(batch, inp, out, 1.0, self.value(x).data(), false, self.value(w).data(), false, 1.0, &mut y);
        let value = Tensor::new(vec![batch, out], y)?;
        self.push(value, Op::Dense { x, w, b }, &[x, w, b])
    }

    /// Causal "same" convolution: `out[j, f] = b[f] + sum_k sum_h K[k, h, f] x[j - k*d, h]`,
    /// with zeros for negative time indices.
    pub fn conv1d(&mut self, x: Var, k: Var, b: Var, dilation: usize) -> Result<Var> {
        let (xs, ks, bs) = (self.value(x).shape(), self.value(k).shape(), self.value(b).shape());
        if xs.len() != 3 || ks.len() != 3 || xs[2] != ks[1] || bs != [ks[2]] {
            return Err(shape_err(format!(
                "conv1d: x {xs:?}, kernel {ks:?}, bias {bs:?}"
            )));
        }
        if dilation == 0 {
            return Err(shape_err("conv1d: dilation must be >= 1".into()));
        }
        let (batch, steps, chans) = (xs[0], xs[1], xs[2]);
        let (taps, filters) = (ks[0], ks[2]);
        let width = taps * chans;
        let xd = self.value(x).data();
        let mut cols = vec![0.0; batch * steps * width];
        for bi in 0..batch {
            for j in 0..steps {
                let row = &mut cols[(bi * steps + j) * width..(bi * steps + j + 1) * width];
                for tap in 0..taps {
                    let shift = tap * dilation;
                    if shift > j {
                        break;
                    }
                    let src = (bi * steps + j - shift) * chans;
                    row[tap * chans..(tap + 1) * chans].copy_from_slice(&xd[src..src + chans]);
                }
            }
        }
        let mut y = Vec::with_capacity(batch * steps * filters);
        for _ in 0..batch * steps {
            y.extend_from_slice(self.value(b).data());
        }
        gemm(batch * steps, width, filters, 1.0, &cols, false, self.value(k).data(), false, 1.0, &mut y);
        let value = Tensor::new(vec![batch, steps, filters], y)?;
        self.push(value, Op::Conv1d { x, k, b, dilation, cols }, &[x, k, b])
    }

    /// Non-overlapping max pooling along time; the remainder is truncated.
    pub fn maxpool1d(&mut self, x: Var, pool: usize) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 3 || pool == 0 || pool > xs[1] {
            return Err(shape_err(format!("maxpool1d: pool {pool} on {xs:?}")));
        }
        let (batch, steps, chans) = (xs[0], xs[1], xs[2]);
        let out_steps = steps / pool;
        let xd = self.value(x).data();
        let mut y = vec![0.0; batch * out_steps * chans];
        let mut argmax = vec![0usize; y.len()];
        for bi in 0..batch {
            for j in 0..out_steps {
                for c in 0..chans {
                    let mut best = (bi * steps + j * pool) * chans + c;
                    for i in 1..pool {
                        let cand = (bi * steps + j * pool + i) * chans + c;
                        if xd[cand] > xd[best] {
                            best = cand;
                        }
                    }
                    let o = (bi * out_steps + j) * chans + c;
                    y[o] = xd[best];
                    argmax[o] = best;
                }
            }
        }
        let value = Tensor::new(vec![batch, out_steps, chans], y)?;
        self.push(value, Op::MaxPool { x, argmax }, &[x])
    }

    /// Nearest-neighbour repetition along time.
    pub fn upsample1d(&mut self, x: Var, factor: usize) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 3 || factor == 0 {
            return Err(shape_err(format!("upsample1d: factor {factor} on {xs:?}")));
        }
        let (batch, steps, chans) = (xs[0], xs[1], xs[2]);
        let xd = self.value(x).data();
        let mut y = Vec::with_capacity(xd.len() * factor);
        for bi in 0..batch {
            for j in 0..steps {
                let src = &xd[(bi * steps + j) * chans..(bi * steps + j + 1) * chans];
                for _ in 0..factor {
                    y.extend_from_slice(src);
                }
            }
        }
        let value = Tensor::new(vec![batch, steps * factor, chans], y)?;
        self.push(value, Op::Upsample { x, factor }, &[x])
    }

    /// Keeps the first `len` time steps.
    pub fn crop_time(&mut self, x: Var, len: usize) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 3 || len > xs[1] {
            return Err(shape_err(format!("crop_time: {len} steps from {xs:?}")));
        }
        let (batch, steps, chans) = (xs[0], xs[1], xs[2]);
        let xd = self.value(x).data();
        let mut y = Vec::with_capacity(batch * len * chans);
        for bi in 0..batch {
            y.extend_from_slice(&xd[bi * steps * chans..(bi * steps + len) * chans]);
        }
        let value = Tensor::new(vec![batch, len, chans], y)?;
        self.push(value, Op::CropTime { x }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        self.push(value, Op::Reshape { x }, &[x])
    }

    /// Flattens everything after the batch axis.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let batch = t.batch();
        let rest = t.len() / batch.max(1);
        self.reshape(x, vec![batch, rest])
    }

    fn bn_layout(&self, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize)> {
        let xs = self.value(x).shape();
        let chans = *xs.last().unwrap_or(&0);
        if xs.len() < 2
            || self.value(gamma).shape() != [chans]
            || self.value(beta).shape() != [chans]
        {
            return Err(shape_err(format!(
                "batchnorm: x {:?}, gamma {:?}, beta {:?}",
                xs,
                self.value(gamma).shape(),
                self.value(beta).shape()
            )));
        }
        Ok((self.value(x).len() / chans, chans))
    }

    /// Training-mode batchnorm over every axis except the last.
    pub fn batchnorm_train(&mut self, x: Var, gamma: Var, beta: Var) -> Result<(Var, BatchStats)> {
        let (count, chans) = self.bn_layout(x, gamma, beta)?;
        if self.value(x).batch() < 2 {
            return Err(shape_err("batchnorm: training mode needs a batch of at least 2".into()));
        }
        let xd = self.value(x).data();
        let mut mean = vec![0.0; chans];
        for row in xd.chunks_exact(chans) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= count as f64);
        let mut var = vec![0.0; chans];
        for row in xd.chunks_exact(chans) {
            for c in 0..chans {
                let d = row[c] - mean[c];
                var[c] += d * d;
            }
        }
        var.iter_mut().for_each(|v| *v /= count as f64);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = Vec::with_capacity(xd.len());
        let mut y = Vec::with_capacity(xd.len());
        for row in xd.chunks_exact(chans) {
            for c in 0..chans {
                let h = (row[c] - mean[c]) * inv_std[c];
                xhat.push(h);
                y.push(g[c] * h + bt[c]);
            }
        }
        let value = Tensor::new(self.value(x).shape().to_vec(), y)?;
        let out = self.push(
            value,
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, train: true },
            &[x, gamma, beta],
        )?;
        Ok((out, BatchStats { mean, var, count }))
    }

    /// Inference-mode batchnorm using fixed running statistics.
    pub fn batchnorm_infer(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
    ) -> Result<Var> {
        let (_, chans) = self.bn_layout(x, gamma, beta)?;
        if running_mean.len() != chans || running_var.len() != chans {
            return Err(shape_err("batchnorm: running statistics length".into()));
        }
        let inv_std: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let xd = self.value(x).data();
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = Vec::with_capacity(xd.len());
        let mut y = Vec::with_capacity(xd.len());
        for row in xd.chunks_exact(chans) {
            for c in 0..chans {
                let h = (row[c] - running_mean[c]) * inv_std[c];
                xhat.push(h);
                y.push(g[c] * h + bt[c]);
            }
        }
        let value = Tensor::new(self.value(x).shape().to_vec(), y)?;
        self.push(
            value,
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, train: false },
            &[x, gamma, beta],
        )
    }

    /// Multiplies by a precomputed mask (entries 0 or 1/(1-p)).
    pub fn dropout_mask(&mut self, x: Var, mask: Vec<f64>) -> Result<Var> {
        if mask.len() != self.value(x).len() {
            return Err(shape_err("dropout: mask length".into()));
        }
        let y: Vec<f64> = self.value(x).data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let value = Tensor::new(self.value(x).shape().to_vec(), y)?;
        self.push(value, Op::Dropout { x, mask }, &[x])
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var> {
        if kind == Activation::Softmax {
            return self.softmax(x);
        }
        if kind == Activation::Linear {
            return Ok(x);
        }
        let f = |v: f64| match kind {
            Activation::Relu => v.max(0.0),
            Activation::LeakyRelu(s) => {
                if v > 0.0 {
                    v
                } else {
                    s * v
                }
            }
            Activation::Sigmoid => sigmoid(v),
            Activation::Tanh => v.tanh(),
            Activation::Linear | Activation::Softmax => unreachable!(),
        };
        let value = Tensor::from_fn(self.value(x).shape(), |i| f(self.nodes[x.0].value.data()[i]));
        self.push(value, Op::Act { x, kind }, &[x])
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let width = t.last_dim();
        let mut y = Vec::with_capacity(t.len());
        for row in t.data().chunks_exact(width) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
            let total: f64 = exps.iter().sum();
            y.extend(exps.iter().map(|e| e / total));
        }
        let value = Tensor::new(t.shape().to_vec(), y)?;
        self.push(value, Op::Softmax { x }, &[x])
    }

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let t = self.value(x);
        let value = Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect())?;
        self.push(value, op, &[x])
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.map(x, f64::exp, Op::Exp { x })
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.map(x, |v| v * v, Op::Square { x })
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.map(x, softplus, Op::Softplus { x })
    }

    /// `ln(max(x, floor))`; the gradient is zero where the floor is active.
    pub fn log_clamped(&mut self, x: Var, floor: f64) -> Result<Var> {
        self.map(x, move |v| v.max(floor).ln(), Op::Log { x, floor })
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.map(x, move |v| c * v, Op::Scale { x, c })
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.map(x, move |v| v + c, Op::AddScalar { x })
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(format!(
                "{}: {:?} vs {:?}",
                op.name(),
                ta.shape(),
                tb.shape()
            )));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(value, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, |x, y| x * y, Op::Mul { a, b })
    }

    /// Concatenates rank-2 tensors along the feature axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let batch = self.value(parts[0]).batch();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.value(p).shape();
            if s.len() != 2 || s[0] != batch {
                return Err(shape_err(format!("concat: part shape {s:?}, batch {batch}")));
            }
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let mut y = Vec::with_capacity(batch * total);
        for bi in 0..batch {
            for (&p, &w) in parts.iter().zip(&widths) {
                y.extend_from_slice(&self.value(p).data()[bi * w..(bi + 1) * w]);
            }
        }
        let value = Tensor::new(vec![batch, total], y)?;
        self.push(value, Op::Concat { parts: parts.to_vec() }, parts)
    }

    /// Columns `start..start + len` of a rank-2 tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.value(x).shape().to_vec();
        if s.len() != 2 || start + len > s[1] {
            return Err(shape_err(format!("slice_cols: {start}+{len} of {s:?}")));
        }
        let xd = self.value(x).data();
        let mut y = Vec::with_capacity(s[0] * len);
        for bi in 0..s[0] {
            y.extend_from_slice(&xd[bi * s[1] + start..bi * s[1] + start + len]);
        }
        let value = Tensor::new(vec![s[0], len], y)?;
        self.push(value, Op::SliceCols { x, start }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(total), Op::Sum { x }, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let m = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push(Tensor::scalar(m), Op::Mean { x }, &[x])
    }

    /// `y[b] = x[b, idx[b]]` for a rank-2 `x`.
    pub fn pick_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let s = self.value(x).shape().to_vec();
        if s.len() != 2 || idx.len() != s[0] || idx.iter().any(|&i| i >= s[1]) {
            return Err(shape_err(format!("pick_rows: {} indices into {s:?}", idx.len())));
        }
        let xd = self.value(x).data();
        let y = idx.iter().enumerate().map(|(b, &i)| xd[b * s[1] + i]).collect();
        let value = Tensor::new(vec![s[0]], y)?;
        self.push(value, Op::PickRows { x, idx: idx.to_vec() }, &[x])
    }

    /// Reverse-mode sweep from the scalar `loss`.
    ///
    /// A graph can be differentiated once; a second call is an error rather
    /// than a silent re-accumulation.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.backward_done {
            return Err(Error::Gradient(
                "backward already ran on this graph; build a new graph".into(),
            ));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Gradient(format!(
                "loss must be scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::default();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                let t = Tensor::new(self.nodes[i].value.shape().to_vec(), g)?;
                match self.nodes[i].binding {
                    Some(key) => {
                        if let Some(acc) = out.params.get_mut(&key) {
                            for (a, v) in acc.data_mut().iter_mut().zip(t.data()) {
                                *a += v;
                            }
                        } else {
                            out.params.insert(key, t);
                        }
                    }
                    None => {
                        out.leaves.insert(i, t);
                    }
                }
                continue;
            }
            let contributions = self.local_grads(i, &g);
            for (target, contrib) in contributions {
                if !self.nodes[target.0].needs_grad {
                    continue;
                }
                if let Some(bad) = contrib.iter().position(|v| !v.is_finite()) {
                    return Err(Error::numeric(
                        self.describe(i),
                        format!("non-finite gradient flowing into {} at element {bad}", self.describe(target.0)),
                    ));
                }
                match &mut grads[target.0] {
                    Some(acc) => {
                        for (a, v) in acc.iter_mut().zip(&contrib) {
                            *a += v;
                        }
                    }
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        Ok(out)
    }

    /// Gradient contributions of node `i` to each of its inputs.
    fn local_grads(&self, i: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[i];
        let need = |v: &Var| self.nodes[v.0].needs_grad;
        let val = |v: &Var| self.nodes[v.0].value.data();
        let mut res = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Dense { x, w, b } => {
                let ws = self.value(*w).shape();
                let (inp, outd) = (ws[0], ws[1]);
                let batch = self.value(*x).batch();
                if need(x) {
                    let mut dx = vec![0.0; batch * inp];
                    gemm(batch, outd, inp, 1.0, g, false, val(w), true, 0.0, &mut dx);
                    res.push((*x, dx));
                }
                if need(w) {
                    let mut dw = vec![0.0; inp * outd];
                    gemm(inp, batch, outd, 1.0, val(x), true, g, false, 0.0, &mut dw);
                    res.push((*w, dw));
                }
                if need(b) {
                    let mut db = vec![0.0; outd];
                    for row in g.chunks_exact(outd) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    res.push((*b, db));
                }
            }
            Op::Conv1d { x, k, b, dilation, cols } => {
                let xs = self.value(*x).shape();
                let ks = self.value(*k).shape();
                let (batch, steps, chans) = (xs[0], xs[1], xs[2]);
                let (taps, filters) = (ks[0], ks[2]);
                let width = taps * chans;
                let rows = batch * steps;
                if need(k) {
                    let mut dk = vec![0.0; width * filters];
                    gemm(width, rows, filters, 1.0, cols, true, g, false, 0.0, &mut dk);
                    res.push((*k, dk));
                }
                if need(b) {
                    let mut db = vec![0.0; filters];
                    for row in g.chunks_exact(filters) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    res.push((*b, db));
                }
                if need(x) {
                    let mut dcols = vec![0.0; rows * width];
                    gemm(rows, filters, width, 1.0, g, false, val(k), true, 0.0, &mut dcols);
                    let mut dx = vec![0.0; batch * steps * chans];
                    for bi in 0..batch {
                        for j in 0..steps {
                            let row = &dcols[(bi * steps + j) * width..(bi * steps + j + 1) * width];
                            for tap in 0..taps {
                                let shift = tap * dilation;
                                if shift > j {
                                    break;
                                }
                                let dst = (bi * steps + j - shift) * chans;
                                for h in 0..chans {
                                    dx[dst + h] += row[tap * chans + h];
                                }
                            }
                        }
                    }
                    res.push((*x, dx));
                }
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = vec![0.0; self.value(*x).len()];
                for (o, &src) in argmax.iter().enumerate() {
                    dx[src] += g[o];
                }
                res.push((*x, dx));
            }
            Op::Upsample { x, factor } => {
                let xs = self.value(*x).shape();
                let (batch, steps, chans) = (xs[0], xs[1], xs[2]);
                let mut dx = vec![0.0; batch * steps * chans];
                for bi in 0..batch {
                    for j in 0..steps {
                        for r in 0..*factor {
                            let src = (bi * steps * factor + j * factor + r) * chans;
                            let dst = (bi * steps + j) * chans;
                            for c in 0..chans {
                                dx[dst + c] += g[src + c];
                            }
                        }
                    }
                }
                res.push((*x, dx));
            }
            Op::CropTime { x } => {
                let xs = self.value(*x).shape();
                let (batch, steps, chans) = (xs[0], xs[1], xs[2]);
                let len = node.value.shape()[1];
                let mut dx = vec![0.0; batch * steps * chans];
                for bi in 0..batch {
                    dx[bi * steps * chans..(bi * steps + len) * chans]
                        .copy_from_slice(&g[bi * len * chans..(bi + 1) * len * chans]);
                }
                res.push((*x, dx));
            }
            Op::Reshape { x } => res.push((*x, g.to_vec())),
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, train } => {
                let chans = inv_std.len();
                let count = (xhat.len() / chans) as f64;
                let gam = val(gamma);
                let mut dgamma = vec![0.0; chans];
                let mut dbeta = vec![0.0; chans];
                for (grow, hrow) in g.chunks_exact(chans).zip(xhat.chunks_exact(chans)) {
                    for c in 0..chans {
                        dgamma[c] += grow[c] * hrow[c];
                        dbeta[c] += grow[c];
                    }
                }
                if need(x) {
                    let mut dx = Vec::with_capacity(g.len());
                    if *train {
                        // dx = inv_std/n * (n*dxhat - sum(dxhat) - xhat*sum(dxhat*xhat)),
                        // with dxhat = gamma*g.
                        for (grow, hrow) in g.chunks_exact(chans).zip(xhat.chunks_exact(chans)) {
                            for c in 0..chans {
                                let v = gam[c] * inv_std[c] / count
                                    * (count * grow[c] - dbeta[c] - hrow[c] * dgamma[c]);
                                dx.push(v);
                            }
                        }
                    } else {
                        for grow in g.chunks_exact(chans) {
                            for c in 0..chans {
                                dx.push(grow[c] * gam[c] * inv_std[c]);
                            }
                        }
                    }
                    res.push((*x, dx));
                }
                res.push((*gamma, dgamma));
                res.push((*beta, dbeta));
            }
            Op::Dropout { x, mask } => {
                res.push((*x, g.iter().zip(mask).map(|(a, m)| a * m).collect()));
            }
            Op::Act { x, kind } => {
                let xv = val(x);
                let yv = node.value.data();
                let dx = match kind {
                    Activation::Relu => g.iter().zip(xv).map(|(d, &v)| if v > 0.0 { *d } else { 0.0 }).collect(),
                    Activation::LeakyRelu(s) => g
                        .iter()
                        .zip(xv)
                        .map(|(d, &v)| if v > 0.0 { *d } else { s * d })
                        .collect(),
                    Activation::Sigmoid => g.iter().zip(yv).map(|(d, y)| d * y * (1.0 - y)).collect(),
                    Activation::Tanh => g.iter().zip(yv).map(|(d, y)| d * (1.0 - y * y)).collect(),
                    Activation::Linear | Activation::Softmax => g.to_vec(),
                };
                res.push((*x, dx));
            }
            Op::Softmax { x } => {
                let width = node.value.last_dim();
                let mut dx = Vec::with_capacity(g.len());
                for (grow, yrow) in g.chunks_exact(width).zip(node.value.data().chunks_exact(width)) {
                    let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    dx.extend(grow.iter().zip(yrow).map(|(d, y)| y * (d - dot)));
                }
                res.push((*x, dx));
            }
            Op::Exp { x } => res.push((*x, g.iter().zip(node.value.data()).map(|(d, y)| d * y).collect())),
            Op::Square { x } => res.push((*x, g.iter().zip(val(x)).map(|(d, v)| 2.0 * d * v).collect())),
            Op::Softplus { x } => {
                res.push((*x, g.iter().zip(val(x)).map(|(d, &v)| d * sigmoid(v)).collect()))
            }
            Op::Log { x, floor } => res.push((
                *x,
                g.iter()
                    .zip(val(x))
                    .map(|(d, &v)| if v > *floor { d / v } else { 0.0 })
                    .collect(),
            )),
            Op::Scale { x, c } => res.push((*x, g.iter().map(|d| c * d).collect())),
            Op::AddScalar { x } => res.push((*x, g.to_vec())),
            Op::Add { a, b } => {
                res.push((*a, g.to_vec()));
                res.push((*b, g.to_vec()));
            }
            Op::Sub { a, b } => {
                res.push((*a, g.to_vec()));
                res.push((*b, g.iter().map(|d| -d).collect()));
            }
            Op::Mul { a, b } => {
                res.push((*a, g.iter().zip(val(b)).map(|(d, v)| d * v).collect()));
                res.push((*b, g.iter().zip(val(a)).map(|(d, v)| d * v).collect()));
            }
            Op::Concat { parts } => {
                let batch = node.value.batch();
                let total = node.value.last_dim();
                let mut offset = 0;
                for p in parts {
                    let w = self.value(*p).last_dim();
                    let mut dp = Vec::with_capacity(batch * w);
                    for bi in 0..batch {
                        dp.extend_from_slice(&g[bi * total + offset..bi * total + offset + w]);
                    }
                    res.push((*p, dp));
                    offset += w;
                }
            }
            Op::SliceCols { x, start } => {
                let s = self.value(*x).shape();
                let len = node.value.last_dim();
                let mut dx = vec![0.0; s[0] * s[1]];
                for bi in 0..s[0] {
                    dx[bi * s[1] + start..bi * s[1] + start + len]
                        .copy_from_slice(&g[bi * len..(bi + 1) * len]);
                }
                res.push((*x, dx));
            }
            Op::Sum { x } => res.push((*x, vec![g[0]; self.value(*x).len()])),
            Op::Mean { x } => {
                let n = self.value(*x).len();
                res.push((*x, vec![g[0] / n as f64; n]));
            }
            Op::PickRows { x, idx } => {
                let width = self.value(*x).last_dim();
                let mut dx = vec![0.0; self.value(*x).len()];
                for (b, &i) in idx.iter().enumerate() {
                    dx[b * width + i] = g[b];
                }
                res.push((*x, dx));
            }
        }
        res
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn conv_two_tap_direct_sum() {
        let mut g = Graph::new();
        let x = g.input(t(&[1, 3, 1], &[1., 2., 3.]));
        let k = g.constant(t(&[2, 1, 1], &[1., 1.]));
        let b = g.constant(t(&[1], &[0.]));
        let y = g.conv1d(x, k, b, 1).unwrap();
        assert_eq!(g.value(y).data(), &[1., 3., 5.]);
    }

    #[test]
    fn conv_single_tap_identity() {
        let mut g = Graph::new();
        let data: Vec<f64> = (0..12).map(|i| i as f64 * 0.5 - 2.0).collect();
        let x = g.input(t(&[2, 6, 1], &data));
        let k = g.constant(t(&[1, 1, 1], &[1.]));
        let b = g.constant(t(&[1], &[0.]));
        let y = g.conv1d(x, k, b, 1).unwrap();
        assert_eq!(g.value(y).data(), &data[..]);
    }

    #[test]
    fn conv_channel_mismatch_is_shape_error() {
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(&[1, 4, 2]));
        let k = g.constant(Tensor::zeros(&[2, 3, 1]));
        let b = g.constant(Tensor::zeros(&[1]));
        assert!(matches!(g.conv1d(x, k, b, 1), Err(Error::Shape(_))));
    }

    #[test]
    fn dense_small_case() {
        let mut g = Graph::new();
        let x = g.input(t(&[1, 2], &[1., 2.]));
        let w = g.constant(t(&[2, 2], &[1., 0., 0., 2.]));
        let b = g.constant(t(&[2], &[1., 1.]));
        let y = g.dense(x, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[2., 5.]);
        let bad = g.constant(Tensor::zeros(&[3, 2]));
        assert!(g.dense(x, bad, b).is_err());
    }

    #[test]
    fn maxpool_and_upsample_basics() {
        let mut g = Graph::new();
        let x = g.input(t(&[1, 4, 1], &[1., 3., 2., 5.]));
        let p = g.maxpool1d(x, 2).unwrap();
        assert_eq!(g.value(p).data(), &[3., 5.]);
        let same = g.maxpool1d(x, 1).unwrap();
        assert_eq!(g.value(same).data(), g.value(x).data());
        assert!(g.maxpool1d(x, 5).is_err());

        let u = g.input(t(&[1, 2, 1], &[1., 2.]));
        let up = g.upsample1d(u, 2).unwrap();
        assert_eq!(g.value(up).data(), &[1., 1., 2., 2.]);
        let one = g.upsample1d(u, 1).unwrap();
        assert_eq!(g.value(one).data(), &[1., 2.]);
    }

    #[test]
    fn upsample_after_maxpool_is_identity_on_constant() {
        let mut g = Graph::new();
        let x = g.input(Tensor::filled(&[2, 8, 3], 1.7));
        let p = g.maxpool1d(x, 2).unwrap();
        let u = g.upsample1d(p, 2).unwrap();
        assert_eq!(g.value(u), g.value(x));
    }

    #[test]
    fn maxpool_ties_route_to_first_index() {
        let mut g = Graph::new();
        let x = g.input(t(&[1, 2, 1], &[4., 4.]));
        let p = g.maxpool1d(x, 2).unwrap();
        let s = g.sum(p).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[1., 0.]);
    }

    #[test]
    fn activations_at_reference_points() {
        let mut g = Graph::new();
        let x = g.input(t(&[1, 2], &[0., -1.]));
        let s = g.activation(x, Activation::Sigmoid).unwrap();
        assert_eq!(g.value(s).data()[0], 0.5);
        let l = g.activation(x, Activation::LeakyRelu(0.1)).unwrap();
        assert!((g.value(l).data()[1] + 0.1).abs() < 1e-15);
        let z = g.input(t(&[2, 3], &[1., 2., 3., -50., 0., 700.]));
        let sm = g.activation(z, Activation::Softmax).unwrap();
        for row in g.value(sm).data().chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn sum_gradient_is_all_ones() {
        let mut g = Graph::new();
        let x = g.input(Tensor::from_fn(&[3, 4], |i| i as f64));
        let s = g.sum(x).unwrap();
        let grads = g.backward(s).unwrap();
        assert!(grads.wrt(x).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn second_backward_is_an_error() {
        let mut g = Graph::new();
        let x = g.input(Tensor::filled(&[2], 1.0));
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert!(matches!(g.backward(s), Err(Error::Gradient(_))));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::new();
        let x = g.input(Tensor::filled(&[2], 1.0));
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn non_finite_forward_is_numeric_error() {
        let mut g = Graph::new();
        let x = g.input(Tensor::filled(&[1], 800.0));
        assert!(matches!(g.exp(x), Err(Error::Numeric { .. })));
    }

    #[test]
    fn nan_gradient_names_the_layer() {
        let mut g = Graph::new();
        let x = g.input(Tensor::filled(&[1], 0.0));
        let w = g.input(Tensor::filled(&[1], f64::MAX));
        let y = g.mul(x, w).unwrap();
        g.set_label(y, "product");
        let sq = g.scale(y, f64::MAX).unwrap();
        let s = g.sum(sq).unwrap();
        let err = g.backward(s).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("product") || msg.contains("scale"), "{msg}");
    }

    #[test]
    fn batchnorm_requires_batch_of_two_in_training() {
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(&[1, 3]));
        let gm = g.constant(Tensor::filled(&[3], 1.0));
        let bt = g.constant(Tensor::zeros(&[3]));
        assert!(g.batchnorm_train(x, gm, bt).is_err());
    }

    #[test]
    fn batchnorm_standardizes_each_channel() {
        let mut g = Graph::new();
        let x = g.input(Tensor::from_fn(&[4, 5, 3], |i| ((i * 7919) % 31) as f64 * 0.3 - 2.0));
        let gm = g.constant(Tensor::filled(&[3], 1.0));
        let bt = g.constant(Tensor::zeros(&[3]));
        let (y, _) = g.batchnorm_train(x, gm, bt).unwrap();
        let yd = g.value(y).data();
        for c in 0..3 {
            let vals: Vec<f64> = yd.iter().skip(c).step_by(3).copied().collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|a| (a - m).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(m.abs() < 1e-9);
            assert!((v - 1.0).abs() < 1e-3);
        }
    }
}
