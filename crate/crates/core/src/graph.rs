//! Tape-based reverse-mode differentiation.
//!
//! Every op appends a node holding its output tensor and whatever the
//! backward pass needs. [`Graph::backward`] walks the tape in reverse and
//! accumulates gradients into each node's `Tensor::grad`.

use crate::error::{Error, Result};
use crate::kernels::{self, BN_EPS};
use crate::param::{ParamId, ParamStore};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    Train,
    Eval,
}

/// Batch statistics produced by a training-mode batch norm; the owner of the
/// running-stat buffers folds them in with [`BnUpdate::apply`].
#[derive(Clone, Debug)]
pub struct BnUpdate {
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub batch_mean: Vec<f64>,
    pub batch_var_unbiased: Vec<f64>,
}

impl BnUpdate {
    pub fn apply<T: Element>(&self, store: &mut ParamStore<T>) {
        let m = kernels::BN_MOMENTUM;
        let rm = store.get_mut(self.running_mean).tensor.data_mut();
        for (r, b) in rm.iter_mut().zip(&self.batch_mean) {
            *r = T::of(m * r.f64() + (1.0 - m) * b);
        }
        let rv = store.get_mut(self.running_var).tensor.data_mut();
        for (r, b) in rv.iter_mut().zip(&self.batch_var_unbiased) {
            *r = T::of(m * r.f64() + (1.0 - m) * b);
        }
    }
}

enum Op<T: Element> {
    Leaf,
    Conv2d {
        x: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        pad: usize,
        cols: Vec<T>,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    /// Shared by global max pooling and RoI pooling; `usize::MAX` marks an
    /// output element with no source (empty RoI bin).
    Route {
        x: Var,
        argmax: Vec<usize>,
    },
    Upsample2x {
        x: Var,
    },
    BatchNormTrain {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<f64>,
    },
    BatchNormEval {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<f64>,
    },
    Relu {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        factor: f64,
    },
    ConcatChannels {
        a: Var,
        b: Var,
    },
    ChannelScale {
        x: Var,
        mu: Var,
    },
    Gather {
        x: Var,
        index: Vec<usize>,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    L2Regression {
        pred: Var,
        target: Vec<T>,
        mask: Vec<bool>,
    },
    WeightedSum {
        x: Var,
        weights: Vec<T>,
    },
}

struct Node<T: Element> {
    value: Tensor<T>,
    op: Op<T>,
}

pub struct Graph<T: Element = f32> {
    nodes: Vec<Node<T>>,
    bindings: Vec<(ParamId, Var)>,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn scalar<T: Element>(v: f64) -> Tensor<T> {
    Tensor::full([1, 1, 1, 1], T::of(v))
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            bindings: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, mut value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        value.requires_grad = requires_grad;
        value.grad = None;
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad
    }

    /// Constant input; no gradient is tracked.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn leaf(&mut self, t: Tensor<T>, requires_grad: bool) -> Var {
        self.push(t, Op::Leaf, requires_grad)
    }

    /// Binds a stored parameter as a leaf. Trainable parameters track
    /// gradients; [`ParamStore`] buffers do not.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let p = store.get(id);
        let v = self.push(p.tensor.clone(), Op::Leaf, p.trainable);
        self.bindings.push((id, v));
        v
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0].f64()
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad.as_deref()
    }

    pub fn conv2d(&mut self, x: Var, kernel: Var, bias: Var, stride: usize, pad: usize) -> Result<Var> {
        let (out, cols) = kernels::conv2d_forward(
            self.value(x),
            self.value(kernel),
            self.value(bias),
            stride,
            pad,
        )?;
        let rg = self.rg(x) || self.rg(kernel) || self.rg(bias);
        Ok(self.push(out, Op::Conv2d { x, kernel, bias, stride, pad, cols }, rg))
    }

    pub fn max_pool2d(&mut self, x: Var, k: usize, stride: usize) -> Result<Var> {
        let (out, argmax) = kernels::max_pool2d_forward(self.value(x), k, stride)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::MaxPool { x, argmax }, rg))
    }

    pub fn global_max_pool(&mut self, x: Var) -> Result<Var> {
        let (out, argmax) = kernels::global_max_pool_forward(self.value(x))?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Route { x, argmax }, rg))
    }

    /// Output whose element `i` copies `x[argmax[i]]` (or 0 for `usize::MAX`),
    /// with gradient routed back to that position.
    pub fn route(&mut self, x: Var, shape: [usize; 4], argmax: Vec<usize>) -> Result<Var> {
        if argmax.len() != shape.iter().product::<usize>() {
            return Err(Error::dim("route", "index length does not match output shape"));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(argmax.len());
        for &i in &argmax {
            if i == usize::MAX {
                data.push(T::zero());
            } else if i < src.len() {
                data.push(src[i]);
            } else {
                return Err(Error::Index { op: "route", index: i, bound: src.len() });
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, data)?, Op::Route { x, argmax }, rg))
    }

    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let out = kernels::upsample2x_forward(self.value(x))?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Upsample2x { x }, rg))
    }

    /// Batch normalization. In train mode returns the batch statistics that
    /// the caller should fold into the running buffers.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: (Var, Var),
        mode: NormMode,
    ) -> Result<(Var, Option<(Vec<f64>, Vec<f64>)>)> {
        let xv = self.value(x);
        let [n, c, h, w] = xv.shape();
        for (name, v) in [("gamma", gamma), ("beta", beta), ("running_mean", running.0), ("running_var", running.1)] {
            if self.value(v).len() != c {
                return Err(Error::dim(
                    "batch_norm",
                    format!("{name} length {} != channels {c} (axis 1)", self.value(v).len()),
                ));
            }
        }
        let (mean, var, stats) = match mode {
            NormMode::Train => {
                let (mean, var) = kernels::channel_stats(xv);
                let count = (n * h * w) as f64;
                let unbiased = var
                    .iter()
                    .map(|v| if count > 1.0 { v * count / (count - 1.0) } else { *v })
                    .collect();
                (mean.clone(), var, Some((mean, unbiased)))
            }
            NormMode::Eval => {
                let m = self.value(running.0).data().iter().map(|v| v.f64()).collect();
                let v = self.value(running.1).data().iter().map(|v| v.f64()).collect();
                (m, v, None)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let hw = h * w;
        let mut xhat = Vec::with_capacity(xv.len());
        let mut out = Vec::with_capacity(xv.len());
        for (p, plane) in xv.data().chunks(hw).enumerate() {
            let ch = p % c;
            let (m, s, gg, bb) = (mean[ch], inv_std[ch], g[ch].f64(), b[ch].f64());
            for v in plane {
                let xh = (v.f64() - m) * s;
                xhat.push(T::of(xh));
                out.push(T::of(gg * xh + bb));
            }
        }
        let out = Tensor::new([n, c, h, w], out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let op = match mode {
            NormMode::Train => Op::BatchNormTrain { x, gamma, beta, xhat, inv_std },
            NormMode::Eval => Op::BatchNormEval { x, gamma, beta, xhat, inv_std },
        };
        Ok((self.push(out, op, rg), stats))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.rg(x);
        self.push(out, Op::Relu { x }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::dim("add", format!("{:?} vs {:?}", av.shape(), bv.shape())));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| *x + *y).collect();
        let out = Tensor::new(av.shape(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add { a, b }, rg))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let f = T::of(factor);
        let out = self.value(x).map(|v| v * f);
        let rg = self.rg(x);
        self.push(out, Op::Scale { x, factor }, rg)
    }

    /// Concatenates along the channel axis: `[a, b]`.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let [n, ca, h, w] = av.shape();
        let [nb, cb, hb, wb] = bv.shape();
        if (n, h, w) != (nb, hb, wb) {
            return Err(Error::dim(
                "concat_channels",
                format!("{:?} vs {:?} differ outside axis 1", av.shape(), bv.shape()),
            ));
        }
        let hw = h * w;
        let mut data = Vec::with_capacity(av.len() + bv.len());
        for i in 0..n {
            data.extend_from_slice(&av.data()[i * ca * hw..(i + 1) * ca * hw]);
            data.extend_from_slice(&bv.data()[i * cb * hw..(i + 1) * cb * hw]);
        }
        let out = Tensor::new([n, ca + cb, h, w], data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::ConcatChannels { a, b }, rg))
    }

    /// `y[n, j] = mu[n, j] * x[n, j]` for every channel plane `j`.
    pub fn channel_scale(&mut self, x: Var, mu: Var) -> Result<Var> {
        let (xv, mv) = (self.value(x), self.value(mu));
        let [n, c, h, w] = xv.shape();
        if mv.shape() != [n, c, 1, 1] {
            return Err(Error::dim(
                "channel_scale",
                format!("gate shape {:?} does not match (n, c) of {:?}", mv.shape(), xv.shape()),
            ));
        }
        let hw = h * w;
        let mut data = Vec::with_capacity(xv.len());
        for (p, plane) in xv.data().chunks(hw).enumerate() {
            let m = mv.data()[p];
            data.extend(plane.iter().map(|v| *v * m));
        }
        let out = Tensor::new([n, c, h, w], data)?;
        let rg = self.rg(x) || self.rg(mu);
        Ok(self.push(out, Op::ChannelScale { x, mu }, rg))
    }

    /// Picks elements of `x` by flat index into an output of `shape`.
    pub fn gather(&mut self, x: Var, index: Vec<usize>, shape: [usize; 4]) -> Result<Var> {
        let src = self.value(x).data();
        if index.len() != shape.iter().product::<usize>() {
            return Err(Error::dim("gather", "index length does not match output shape"));
        }
        let mut data = Vec::with_capacity(index.len());
        for &i in &index {
            data.push(*src.get(i).ok_or(Error::Index { op: "gather", index: i, bound: src.len() })?);
        }
        let out = Tensor::new(shape, data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Gather { x, index }, rg))
    }

    /// Mean over rows of `-log softmax(logits)[label]`; logits are (B, K, 1, 1).
    /// An empty batch yields 0.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let [b, k, h, w] = lv.shape();
        if h != 1 || w != 1 {
            return Err(Error::dim("softmax_cross_entropy", "logits must be (B, K, 1, 1)"));
        }
        if labels.len() != b {
            return Err(Error::dim(
                "softmax_cross_entropy",
                format!("{} labels for batch of {b} (axis 0)", labels.len()),
            ));
        }
        let mut probs = Vec::with_capacity(b * k);
        let mut total = 0.0;
        for (row, &label) in lv.data().chunks(k.max(1)).zip(labels) {
            if label >= k {
                return Err(Error::Index { op: "softmax_cross_entropy", index: label, bound: k });
            }
            let mx = row.iter().map(|v| v.f64()).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v.f64() - mx).exp()).sum();
            let lse = mx + z.ln();
            total += lse - row[label].f64();
            probs.extend(row.iter().map(|v| (v.f64() - lse).exp()));
        }
        let loss = if b > 0 { total / b as f64 } else { 0.0 };
        let rg = self.rg(logits);
        Ok(self.push(
            scalar(loss),
            Op::SoftmaxCrossEntropy { logits, labels: labels.to_vec(), probs },
            rg,
        ))
    }

    /// Sum over masked rows of squared error; pred and target share shape
    /// (B, D, 1, 1) and `mask` has one entry per row.
    pub fn l2_regression(&mut self, pred: Var, target: &Tensor<T>, mask: &[bool]) -> Result<Var> {
        let pv = self.value(pred);
        if pv.shape() != target.shape() {
            return Err(Error::dim(
                "l2_regression",
                format!("pred {:?} vs target {:?}", pv.shape(), target.shape()),
            ));
        }
        let b = pv.n();
        if mask.len() != b {
            return Err(Error::dim("l2_regression", format!("mask length {} != batch {b}", mask.len())));
        }
        let d = if b == 0 { 0 } else { pv.len() / b };
        let mut total = 0.0;
        for (i, &m) in mask.iter().enumerate() {
            if m {
                for j in i * d..(i + 1) * d {
                    let r = pv.data()[j].f64() - target.data()[j].f64();
                    total += r * r;
                }
            }
        }
        let rg = self.rg(pred);
        Ok(self.push(
            scalar(total),
            Op::L2Regression { pred, target: target.data().to_vec(), mask: mask.to_vec() },
            rg,
        ))
    }

    /// `Σ weights[i] * x[i]`: projects any tensor to a scalar, mainly for
    /// checking gradients of non-scalar ops.
    pub fn weighted_sum(&mut self, x: Var, weights: Vec<T>) -> Result<Var> {
        let xv = self.value(x);
        if weights.len() != xv.len() {
            return Err(Error::dim("weighted_sum", "weights length does not match tensor"));
        }
        let s: f64 = xv.data().iter().zip(&weights).map(|(a, b)| a.f64() * b.f64()).sum();
        let rg = self.rg(x);
        Ok(self.push(scalar(s), Op::WeightedSum { x, weights }, rg))
    }

    fn accumulate(&mut self, v: Var, g: &[T]) {
        let node = &mut self.nodes[v.0].value;
        if !node.requires_grad {
            return;
        }
        match node.grad.as_mut() {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += *b),
            None => node.grad = Some(g.to_vec()),
        }
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::dim("backward", "loss must be a scalar"));
        }
        if !self.rg(loss) {
            return Ok(());
        }
        self.nodes[loss.0].value.grad = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(dy) = self.nodes[idx].value.grad.take() else {
                continue;
            };
            let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
            self.backward_op(idx, &op, &dy)?;
            self.nodes[idx].op = op;
            self.nodes[idx].value.grad = Some(dy);
        }
        Ok(())
    }

    fn backward_op(&mut self, idx: usize, op: &Op<T>, dy: &[T]) -> Result<()> {
        match op {
            Op::Leaf => {}
            Op::Conv2d { x, kernel, bias, stride, pad, cols } => {
                let grads = kernels::conv2d_backward(
                    self.value(*x),
                    self.value(*kernel),
                    cols,
                    dy,
                    *stride,
                    *pad,
                    self.rg(*x),
                )?;
                if let Some(dx) = grads.dx {
                    self.accumulate(*x, &dx);
                }
                self.accumulate(*kernel, &grads.dkernel);
                self.accumulate(*bias, &grads.dbias);
            }
            Op::MaxPool { x, argmax } | Op::Route { x, argmax } => {
                let mut dx = vec![T::zero(); self.value(*x).len()];
                for (&i, &g) in argmax.iter().zip(dy) {
                    if i != usize::MAX {
                        dx[i] += g;
                    }
                }
                self.accumulate(*x, &dx);
            }
            Op::Upsample2x { x } => {
                let dx = kernels::upsample2x_backward(self.value(*x).shape(), dy);
                self.accumulate(*x, &dx);
            }
            Op::BatchNormTrain { x, gamma, beta, xhat, inv_std } => {
                let [n, c, h, w] = self.value(*x).shape();
                let hw = h * w;
                let count = (n * hw) as f64;
                let g: Vec<f64> = self.value(*gamma).data().iter().map(|v| v.f64()).collect();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for (p, (dp, xp)) in dy.chunks(hw).zip(xhat.chunks(hw)).enumerate() {
                    let ch = p % c;
                    for (d, xh) in dp.iter().zip(xp) {
                        dbeta[ch] += d.f64();
                        dgamma[ch] += d.f64() * xh.f64();
                    }
                }
                // dx = g*inv_std/m * (m*dy - Σdy - xhat*Σ(dy*xhat))
                let mut dx = Vec::with_capacity(dy.len());
                for (p, (dp, xp)) in dy.chunks(hw).zip(xhat.chunks(hw)).enumerate() {
                    let ch = p % c;
                    let k = g[ch] * inv_std[ch] / count;
                    for (d, xh) in dp.iter().zip(xp) {
                        dx.push(T::of(k * (count * d.f64() - dbeta[ch] - xh.f64() * dgamma[ch])));
                    }
                }
                self.accumulate(*x, &dx);
                let to_t = |v: Vec<f64>| v.into_iter().map(T::of).collect::<Vec<T>>();
                self.accumulate(*gamma, &to_t(dgamma));
                self.accumulate(*beta, &to_t(dbeta));
            }
            Op::BatchNormEval { x, gamma, beta, xhat, inv_std } => {
                let [_, c, h, w] = self.value(*x).shape();
                let hw = h * w;
                let g: Vec<f64> = self.value(*gamma).data().iter().map(|v| v.f64()).collect();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                let mut dx = Vec::with_capacity(dy.len());
                for (p, (dp, xp)) in dy.chunks(hw).zip(xhat.chunks(hw)).enumerate() {
                    let ch = p % c;
                    for (d, xh) in dp.iter().zip(xp) {
                        dbeta[ch] += d.f64();
                        dgamma[ch] += d.f64() * xh.f64();
                        dx.push(T::of(d.f64() * g[ch] * inv_std[ch]));
                    }
                }
                self.accumulate(*x, &dx);
                let to_t = |v: Vec<f64>| v.into_iter().map(T::of).collect::<Vec<T>>();
                self.accumulate(*gamma, &to_t(dgamma));
                self.accumulate(*beta, &to_t(dbeta));
            }
            Op::Relu { x } => {
                let out = self.nodes[idx].value.data();
                let dx: Vec<T> = out
                    .iter()
                    .zip(dy)
                    .map(|(o, d)| if *o > T::zero() { *d } else { T::zero() })
                    .collect();
                self.accumulate(*x, &dx);
            }
            Op::Add { a, b } => {
                self.accumulate(*a, dy);
                self.accumulate(*b, dy);
            }
            Op::Scale { x, factor } => {
                let f = T::of(*factor);
                let dx: Vec<T> = dy.iter().map(|d| *d * f).collect();
                self.accumulate(*x, &dx);
            }
            Op::ConcatChannels { a, b } => {
                let [n, ca, h, w] = self.value(*a).shape();
                let cb = self.value(*b).c();
                let hw = h * w;
                let mut da = Vec::with_capacity(n * ca * hw);
                let mut db = Vec::with_capacity(n * cb * hw);
                for i in 0..n {
                    let base = i * (ca + cb) * hw;
                    da.extend_from_slice(&dy[base..base + ca * hw]);
                    db.extend_from_slice(&dy[base + ca * hw..base + (ca + cb) * hw]);
                }
                self.accumulate(*a, &da);
                self.accumulate(*b, &db);
            }
            Op::ChannelScale { x, mu } => {
                let xv = self.value(*x);
                let hw = xv.h() * xv.w();
                let mut dmu = Vec::with_capacity(xv.n() * xv.c());
                let mut dx = Vec::with_capacity(xv.len());
                let mv = self.value(*mu).data();
                for (p, (xp, gp)) in xv.data().chunks(hw).zip(dy.chunks(hw)).enumerate() {
                    // ∂L/∂μ_j = <∇y_j L, x_j>;  ∂L/∂x_j = μ_j ∇y_j L
                    let dot: f64 = xp.iter().zip(gp).map(|(a, b)| a.f64() * b.f64()).sum();
                    dmu.push(T::of(dot));
                    dx.extend(gp.iter().map(|g| *g * mv[p]));
                }
                self.accumulate(*x, &dx);
                self.accumulate(*mu, &dmu);
            }
            Op::Gather { x, index } => {
                let mut dx = vec![T::zero(); self.value(*x).len()];
                for (&i, &g) in index.iter().zip(dy) {
                    dx[i] += g;
                }
                self.accumulate(*x, &dx);
            }
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                let b = labels.len();
                if b > 0 {
                    let k = probs.len() / b;
                    let scale = dy[0].f64() / b as f64;
                    let mut dl = Vec::with_capacity(probs.len());
                    for (row, &label) in probs.chunks(k).zip(labels) {
                        for (j, p) in row.iter().enumerate() {
                            let onehot = if j == label { 1.0 } else { 0.0 };
                            dl.push(T::of((p - onehot) * scale));
                        }
                    }
                    self.accumulate(*logits, &dl);
                }
            }
            Op::L2Regression { pred, target, mask } => {
                let pv = self.value(*pred).data();
                let b = mask.len();
                let d = if b == 0 { 0 } else { pv.len() / b };
                let s = dy[0].f64();
                let mut dp = vec![T::zero(); pv.len()];
                for (i, &m) in mask.iter().enumerate() {
                    if m {
                        for j in i * d..(i + 1) * d {
                            dp[j] = T::of(2.0 * (pv[j].f64() - target[j].f64()) * s);
                        }
                    }
                }
                self.accumulate(*pred, &dp);
            }
            Op::WeightedSum { x, weights } => {
                let s = dy[0];
                let dx: Vec<T> = weights.iter().map(|w| *w * s).collect();
                self.accumulate(*x, &dx);
            }
        }
        Ok(())
    }

    /// Copies gradients of bound parameters into the store. Trainable
    /// parameters bound more than once receive the sum.
    pub fn collect_param_grads(&self, store: &mut ParamStore<T>) {
        for &(id, v) in &self.bindings {
            let Some(g) = self.grad(v) else {
                let p = store.get_mut(id);
                if p.trainable && p.tensor.grad.is_none() {
                    p.tensor.grad = Some(vec![T::zero(); p.tensor.len()]);
                }
                continue;
            };
            let p = store.get_mut(id);
            if !p.trainable {
                continue;
            }
            match p.tensor.grad.as_mut() {
                Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += *b),
                None => p.tensor.grad = Some(g.to_vec()),
            }
        }
    }

    pub fn bindings(&self) -> &[(ParamId, Var)] {
        &self.bindings
    }
}
