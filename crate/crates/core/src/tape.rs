//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its value and enough saved state
//! to run its adjoint. `Tape::backward` walks the nodes in reverse.

use crate::error::{Error, Result};
use crate::kernels::{self, conv_geometry, Padding2d};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
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
    Shift(Var),
    MulScalar { s: Var, x: Var },
    MulConst(Var, Tensor),
    AddRowBias { x: Var, b: Var },
    MatMul(Var, Var),
    Conv2d { x: Var, k: Var, pad: Padding2d, groups: usize },
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Log(Var),
    Softmax(Var),
    LogSoftmax(Var),
    AvgPool { x: Var, window: (usize, usize) },
    MaxPool { x: Var, argmax: Vec<usize> },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Tensor, inv_std: Vec<f64> },
    BatchNormEval { x: Var, gamma: Var, beta: Var, centered: Tensor, inv_std: Vec<f64> },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    SliceCols { x: Var, start: usize },
    Pick { x: Var, idx: Vec<usize> },
    Index { x: Var, i: usize },
    ConcatRows(Var, Var),
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) | Op::ConcatRows(a, b) => vec![*a, *b],
            Op::MulScalar { s, x } => vec![*s, *x],
            Op::AddRowBias { x, b } => vec![*x, *b],
            Op::Conv2d { x, k, .. } => vec![*x, *k],
            Op::BatchNorm { x, gamma, beta, .. } | Op::BatchNormEval { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Scale(x, _)
            | Op::Shift(x)
            | Op::MulConst(x, _)
            | Op::Relu(x)
            | Op::Sigmoid(x)
            | Op::Tanh(x)
            | Op::Log(x)
            | Op::Softmax(x)
            | Op::LogSoftmax(x)
            | Op::Reshape(x)
            | Op::Sum(x)
            | Op::Mean(x) => vec![*x],
            Op::AvgPool { x, .. }
            | Op::MaxPool { x, .. }
            | Op::SliceCols { x, .. }
            | Op::Pick { x, .. }
            | Op::Index { x, .. } => vec![*x],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    /// Whether any trainable leaf feeds this node.
    grad: bool,
}

/// Single-writer record of one forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints indexed by `Var`; `None` where no gradient reached.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, zeros of `like`'s shape if none flowed.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(like.shape()))
    }
}

/// Per-channel statistics of a training-mode batch-norm call.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance over the normalised axes.
    pub var: Vec<f64>,
    pub count: usize,
}

fn scalar_like(op: &'static str, t: &Tensor) -> Result<()> {
    if t.len() != 1 {
        return Err(Error::shape(op, format!("expected a single-element tensor, got {:?}", t.shape())));
    }
    Ok(())
}

fn channel_layout(shape: &[usize], op: &'static str) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::shape(op, format!("need at least [batch, channels], got {shape:?}")));
    }
    Ok((shape[0], shape[1], shape[2..].iter().product()))
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, grad: true });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient (input data, frozen weights).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, grad: false });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let grad = op.inputs().iter().any(|&v| self.needs(v));
        self.nodes.push(Node { value, op, grad });
        Var(self.nodes.len() - 1)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).mul(self.value(b))?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a).scale(k);
        self.push(v, Op::Scale(a, k))
    }

    /// `a + k` element-wise.
    pub fn shift(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a).map(|x| x + k);
        self.push(v, Op::Shift(a))
    }

    /// Single-element `s` times tensor `x`.
    pub fn mul_scalar(&mut self, s: Var, x: Var) -> Result<Var> {
        scalar_like("mul_scalar", self.value(s))?;
        let k = self.value(s).item();
        let v = self.value(x).scale(k);
        Ok(self.push(v, Op::MulScalar { s, x }))
    }

    /// Element-wise product with a constant (e.g. a dropout mask).
    pub fn mul_const(&mut self, x: Var, c: &Tensor) -> Result<Var> {
        let v = self.value(x).mul(c)?;
        Ok(self.push(v, Op::MulConst(x, c.clone())))
    }

    /// `x: [m, n]` plus row vector `b: [n]`.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        if xv.ndim() != 2 || bv.len() != xv.dim(1) {
            return Err(Error::shape(
                "add_row_bias",
                format!("bias {:?} does not match columns of {:?}", bv.shape(), xv.shape()),
            ));
        }
        let n = xv.dim(1);
        let data: Vec<f64> = xv.data().iter().enumerate().map(|(i, &v)| v + bv.data()[i % n]).collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(out, Op::AddRowBias { x, b }))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = kernels::matmul(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    pub fn conv2d(&mut self, x: Var, k: Var, pad: Padding2d, groups: usize) -> Result<Var> {
        let v = kernels::conv2d(self.value(x), self.value(k), pad, groups)?;
        Ok(self.push(v, Op::Conv2d { x, k, pad, groups }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a.max(0.0));
        self.push(v, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).map(kernels::sigmoid);
        self.push(v, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let v = self.value(x).map(f64::tanh);
        self.push(v, Op::Tanh(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        let v = self.value(x).map(f64::ln);
        self.push(v, Op::Log(x))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let v = kernels::softmax_rows(self.value(x));
        self.push(v, Op::Softmax(x))
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let n = *xv.shape().last().unwrap();
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(n) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let v = Tensor::new(xv.shape().to_vec(), out).unwrap();
        self.push(v, Op::LogSoftmax(x))
    }

    pub fn avgpool2d(&mut self, x: Var, window: (usize, usize)) -> Result<Var> {
        let v = kernels::avgpool2d(self.value(x), window)?;
        Ok(self.push(v, Op::AvgPool { x, window }))
    }

    pub fn maxpool2d(&mut self, x: Var, window: (usize, usize)) -> Result<Var> {
        let xv = self.value(x);
        kernels::pool_geometry(xv.shape(), window, "maxpool2d")?;
        let s = xv.shape();
        let windows = kernels::window_indices(s, window);
        let mut argmax = Vec::with_capacity(windows.len());
        let mut out = Vec::with_capacity(windows.len());
        for idx in &windows {
            let best = *idx
                .iter()
                .max_by(|&&a, &&b| xv.data()[a].total_cmp(&xv.data()[b]))
                .unwrap();
            argmax.push(best);
            out.push(xv.data()[best]);
        }
        let v = Tensor::new(vec![s[0], s[1], s[2] / window.0, s[3] / window.1], out)?;
        Ok(self.push(v, Op::MaxPool { x, argmax }))
    }

    /// Batch normalisation using the statistics of the current batch.
    /// Normalises over every axis except axis 1.
    pub fn batchnorm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchStats)> {
        let xv = self.value(x);
        let (n, c, inner) = channel_layout(xv.shape(), "batchnorm")?;
        let (g, b) = (self.value(gamma), self.value(beta));
        if g.len() != c || b.len() != c {
            return Err(Error::shape("batchnorm", format!("scale/shift must have {c} entries")));
        }
        let count = n * inner;
        let d = xv.data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for bi in 0..n {
            for ch in 0..c {
                let base = (bi * c + ch) * inner;
                mean[ch] += d[base..base + inner].iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= count as f64);
        for bi in 0..n {
            for ch in 0..c {
                let base = (bi * c + ch) * inner;
                var[ch] += d[base..base + inner].iter().map(|v| (v - mean[ch]).powi(2)).sum::<f64>();
            }
        }
        var.iter_mut().for_each(|v| *v /= count as f64);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; d.len()];
        let mut out = vec![0.0; d.len()];
        for (i, (&v, (xh, o))) in d.iter().zip(xhat.iter_mut().zip(out.iter_mut())).enumerate() {
            let ch = (i / inner) % c;
            *xh = (v - mean[ch]) * inv_std[ch];
            *o = *xh * g.data()[ch] + b.data()[ch];
        }
        let shape = xv.shape().to_vec();
        let xhat = Tensor::new(shape.clone(), xhat)?;
        let out = Tensor::new(shape, out)?;
        let v = self.push(out, Op::BatchNorm { x, gamma, beta, xhat, inv_std });
        Ok((v, BatchStats { mean, var, count }))
    }

    /// Batch normalisation with fixed running statistics.
    pub fn batchnorm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let xv = self.value(x);
        let (_, c, inner) = channel_layout(xv.shape(), "batchnorm")?;
        let (g, b) = (self.value(gamma), self.value(beta));
        if g.len() != c || b.len() != c || running_mean.len() != c || running_var.len() != c {
            return Err(Error::shape("batchnorm", format!("per-channel parameters must have {c} entries")));
        }
        let inv_std: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let d = xv.data();
        let mut centered = vec![0.0; d.len()];
        let mut out = vec![0.0; d.len()];
        for (i, &v) in d.iter().enumerate() {
            let ch = (i / inner) % c;
            centered[i] = v - running_mean[ch];
            out[i] = centered[i] * (g.data()[ch] * inv_std[ch]) + b.data()[ch];
        }
        let shape = xv.shape().to_vec();
        let centered = Tensor::new(shape.clone(), centered)?;
        let out = Tensor::new(shape, out)?;
        Ok(self.push(out, Op::BatchNormEval { x, gamma, beta, centered, inv_std }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape)?;
        Ok(self.push(v, Op::Reshape(x)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        self.push(v, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).mean());
        self.push(v, Op::Mean(x))
    }

    /// Columns `[start, start + len)` of a 2-d tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.ndim() != 2 || start + len > xv.dim(1) || len == 0 {
            return Err(Error::shape("slice_cols", format!("columns {start}..{} of {:?}", start + len, xv.shape())));
        }
        let (m, n) = (xv.dim(0), xv.dim(1));
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&xv.data()[i * n + start..i * n + start + len]);
        }
        let v = Tensor::new(vec![m, len], out)?;
        Ok(self.push(v, Op::SliceCols { x, start }))
    }

    /// `out[i] = x[i, idx[i]]` for `x: [m, n]`.
    pub fn pick(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if xv.ndim() != 2 || idx.len() != xv.dim(0) {
            return Err(Error::shape("pick", format!("{} indices for {:?}", idx.len(), xv.shape())));
        }
        let n = xv.dim(1);
        if let Some(&bad) = idx.iter().find(|&&j| j >= n) {
            return Err(Error::invalid(format!("pick: index {bad} out of range for {n} columns")));
        }
        let out: Vec<f64> = idx.iter().enumerate().map(|(i, &j)| xv.data()[i * n + j]).collect();
        let v = Tensor::from_vec(out);
        Ok(self.push(v, Op::Pick { x, idx: idx.to_vec() }))
    }

    /// Flat element `i` as a single-element tensor.
    pub fn index(&mut self, x: Var, i: usize) -> Result<Var> {
        let xv = self.value(x);
        if i >= xv.len() {
            return Err(Error::invalid(format!("index {i} out of range for {} elements", xv.len())));
        }
        let v = Tensor::scalar(xv.data()[i]);
        Ok(self.push(v, Op::Index { x, i }))
    }

    /// Stack two tensors along axis 0.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = Tensor::concat_rows(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::ConcatRows(a, b)))
    }

    /// Adjoints of every node with respect to the single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::shape("grad", format!("loss must be scalar, got shape {:?}", lv.shape())));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::ones(lv.shape()));
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[id];
        let acc = |grads: &mut [Option<Tensor>], v: Var, t: Tensor| {
            if !self.needs(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.data_mut().iter_mut().zip(t.data()).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(t),
            }
        };
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                acc(grads, *a, g.mul(self.value(*b)).unwrap());
                acc(grads, *b, g.mul(self.value(*a)).unwrap());
            }
            Op::Scale(a, k) => acc(grads, *a, g.scale(*k)),
            Op::Shift(a) => acc(grads, *a, g.clone()),
            Op::MulScalar { s, x } => {
                let k = self.value(*s).item();
                let xv = self.value(*x);
                let ds: f64 = gd.iter().zip(xv.data()).map(|(a, b)| a * b).sum();
                acc(grads, *s, Tensor::new(self.value(*s).shape().to_vec(), vec![ds]).unwrap());
                acc(grads, *x, g.scale(k));
            }
            Op::MulConst(x, c) => acc(grads, *x, g.mul(c).unwrap()),
            Op::AddRowBias { x, b } => {
                let n = self.value(*b).len();
                let mut db = vec![0.0; n];
                for (i, v) in gd.iter().enumerate() {
                    db[i % n] += v;
                }
                acc(grads, *x, g.clone());
                acc(grads, *b, Tensor::new(self.value(*b).shape().to_vec(), db).unwrap());
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.dim(0), av.dim(1), bv.dim(1));
                if self.needs(*a) {
                    let da = kernels::matmul_nt(gd, bv.data(), m, n, k);
                    acc(grads, *a, Tensor::new(vec![m, k], da).unwrap());
                }
                if self.needs(*b) {
                    let db = kernels::matmul_tn(av.data(), gd, m, k, n);
                    acc(grads, *b, Tensor::new(vec![k, n], db).unwrap());
                }
            }
            Op::Conv2d { x, k, pad, groups } => {
                let (xv, kv) = (self.value(*x), self.value(*k));
                let geo = conv_geometry(xv.shape(), kv.shape(), *pad, *groups).unwrap();
                if self.needs(*x) {
                    let dx = kernels::conv2d_grad_input(&geo, gd, kv.data());
                    acc(grads, *x, Tensor::new(xv.shape().to_vec(), dx).unwrap());
                }
                if self.needs(*k) {
                    let dk = kernels::conv2d_grad_kernel(&geo, gd, xv.data());
                    acc(grads, *k, Tensor::new(kv.shape().to_vec(), dk).unwrap());
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                acc(grads, *x, g.zip_map(xv, "relu", |gv, v| if v > 0.0 { gv } else { 0.0 }).unwrap());
            }
            Op::Sigmoid(x) => {
                acc(grads, *x, g.zip_map(&node.value, "sigmoid", |gv, y| gv * y * (1.0 - y)).unwrap());
            }
            Op::Tanh(x) => {
                acc(grads, *x, g.zip_map(&node.value, "tanh", |gv, y| gv * (1.0 - y * y)).unwrap());
            }
            Op::Log(x) => {
                acc(grads, *x, g.zip_map(self.value(*x), "log", |gv, v| gv / v).unwrap());
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let n = *y.shape().last().unwrap();
                let mut dx = vec![0.0; y.len()];
                for ((drow, yrow), grow) in dx.chunks_mut(n).zip(y.data().chunks(n)).zip(gd.chunks(n)) {
                    let dot: f64 = yrow.iter().zip(grow).map(|(a, b)| a * b).sum();
                    for ((d, &yv), &gv) in drow.iter_mut().zip(yrow).zip(grow) {
                        *d = yv * (gv - dot);
                    }
                }
                acc(grads, *x, Tensor::new(y.shape().to_vec(), dx).unwrap());
            }
            Op::LogSoftmax(x) => {
                let y = &node.value;
                let n = *y.shape().last().unwrap();
                let mut dx = vec![0.0; y.len()];
                for ((drow, yrow), grow) in dx.chunks_mut(n).zip(y.data().chunks(n)).zip(gd.chunks(n)) {
                    let gsum: f64 = grow.iter().sum();
                    for ((d, &yv), &gv) in drow.iter_mut().zip(yrow).zip(grow) {
                        *d = gv - yv.exp() * gsum;
                    }
                }
                acc(grads, *x, Tensor::new(y.shape().to_vec(), dx).unwrap());
            }
            Op::AvgPool { x, window } => {
                let xv = self.value(*x);
                let windows = kernels::window_indices(xv.shape(), *window);
                let k = (window.0 * window.1) as f64;
                let mut dx = vec![0.0; xv.len()];
                for (w, idx) in windows.iter().enumerate() {
                    for &i in idx {
                        dx[i] += gd[w] / k;
                    }
                }
                acc(grads, *x, Tensor::new(xv.shape().to_vec(), dx).unwrap());
            }
            Op::MaxPool { x, argmax } => {
                let xv = self.value(*x);
                let mut dx = vec![0.0; xv.len()];
                for (w, &i) in argmax.iter().enumerate() {
                    dx[i] += gd[w];
                }
                acc(grads, *x, Tensor::new(xv.shape().to_vec(), dx).unwrap());
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std } => {
                let shape = xhat.shape();
                let (_, c, inner) = channel_layout(shape, "batchnorm").unwrap();
                let m = (xhat.len() / c) as f64;
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for (i, (&gv, &xh)) in gd.iter().zip(xhat.data()).enumerate() {
                    let ch = (i / inner) % c;
                    sum_g[ch] += gv;
                    sum_gx[ch] += gv * xh;
                }
                let gam = self.value(*gamma).data();
                let dx: Vec<f64> = gd
                    .iter()
                    .zip(xhat.data())
                    .enumerate()
                    .map(|(i, (&gv, &xh))| {
                        let ch = (i / inner) % c;
                        gam[ch] * inv_std[ch] / m * (m * gv - sum_g[ch] - xh * sum_gx[ch])
                    })
                    .collect();
                acc(grads, *x, Tensor::new(shape.to_vec(), dx).unwrap());
                acc(grads, *gamma, Tensor::new(self.value(*gamma).shape().to_vec(), sum_gx).unwrap());
                acc(grads, *beta, Tensor::new(self.value(*beta).shape().to_vec(), sum_g).unwrap());
            }
            Op::BatchNormEval { x, gamma, beta, centered, inv_std } => {
                let shape = centered.shape();
                let (_, c, inner) = channel_layout(shape, "batchnorm").unwrap();
                let gam = self.value(*gamma).data();
                let mut dgam = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                let mut dx = vec![0.0; gd.len()];
                for (i, (&gv, &cx)) in gd.iter().zip(centered.data()).enumerate() {
                    let ch = (i / inner) % c;
                    dx[i] = gv * gam[ch] * inv_std[ch];
                    dgam[ch] += gv * cx * inv_std[ch];
                    dbeta[ch] += gv;
                }
                acc(grads, *x, Tensor::new(shape.to_vec(), dx).unwrap());
                acc(grads, *gamma, Tensor::new(self.value(*gamma).shape().to_vec(), dgam).unwrap());
                acc(grads, *beta, Tensor::new(self.value(*beta).shape().to_vec(), dbeta).unwrap());
            }
            Op::Reshape(x) => {
                let shape = self.value(*x).shape().to_vec();
                acc(grads, *x, g.clone().reshape(&shape).unwrap());
            }
            Op::Sum(x) => {
                let xv = self.value(*x);
                acc(grads, *x, Tensor::full(xv.shape(), gd[0]));
            }
            Op::Mean(x) => {
                let xv = self.value(*x);
                acc(grads, *x, Tensor::full(xv.shape(), gd[0] / xv.len() as f64));
            }
            Op::SliceCols { x, start } => {
                let xv = self.value(*x);
                let (m, n) = (xv.dim(0), xv.dim(1));
                let len = node.value.dim(1);
                let mut dx = vec![0.0; m * n];
                for i in 0..m {
                    dx[i * n + start..i * n + start + len].copy_from_slice(&gd[i * len..(i + 1) * len]);
                }
                acc(grads, *x, Tensor::new(vec![m, n], dx).unwrap());
            }
            Op::Pick { x, idx } => {
                let xv = self.value(*x);
                let n = xv.dim(1);
                let mut dx = vec![0.0; xv.len()];
                for (i, &j) in idx.iter().enumerate() {
                    dx[i * n + j] += gd[i];
                }
                acc(grads, *x, Tensor::new(xv.shape().to_vec(), dx).unwrap());
            }
            Op::Index { x, i } => {
                let xv = self.value(*x);
                let mut dx = vec![0.0; xv.len()];
                dx[*i] = gd[0];
                acc(grads, *x, Tensor::new(xv.shape().to_vec(), dx).unwrap());
            }
            Op::ConcatRows(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(grads, *a, Tensor::new(av.shape().to_vec(), gd[..av.len()].to_vec()).unwrap());
                acc(grads, *b, Tensor::new(bv.shape().to_vec(), gd[av.len()..].to_vec()).unwrap());
            }
        }
    }
}

/// `∂loss/∂p` for each `p` in `params`; zeros for parameters the loss does not reach.
pub fn grad(tape: &Tape, loss: Var, params: &[Var]) -> Result<Vec<Tensor>> {
    let grads = tape.backward(loss)?;
    Ok(params.iter().map(|&p| grads.get_or_zeros(p, tape.value(p))).collect())
}

/// Mean cross-entropy of `logits: [m, k]` against integer labels.
pub fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let logp = tape.log_softmax(logits);
    let picked = tape.pick(logp, labels)?;
    let mean = tape.mean(picked);
    Ok(tape.scale(mean, -1.0))
}

/// Mean over rows of the Jensen-Shannon divergence between two row-stochastic
/// `[m, k]` matrices (natural log).
pub fn js_divergence_rows(tape: &mut Tape, p: Var, q: Var) -> Result<Var> {
    let rows = tape.value(p).dim(0) as f64;
    let s = tape.add(p, q)?;
    let mid = tape.scale(s, 0.5);
    let log_mid = tape.log(mid);
    let log_p = tape.log(p);
    let log_q = tape.log(q);
    let dp = tape.sub(log_p, log_mid)?;
    let dq = tape.sub(log_q, log_mid)?;
    let kp = tape.mul(p, dp)?;
    let kq = tape.mul(q, dq)?;
    let both = tape.add(kp, kq)?;
    let total = tape.sum(both);
    Ok(tape.scale(total, 0.5 / rows))
}
