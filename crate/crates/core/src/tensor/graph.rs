//! Tape-based reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so the tape is already a
//! topological order: [`Graph::backward`] walks it once in reverse.

use super::kernels::{self, ConvGeom, PoolGeom};
use super::{Element, Tensor};
use crate::error::{Error, Result};

/// Batch-norm variance epsilon.
pub const BN_EPS: f64 = 1e-5;
/// Fraction of the previous running statistic kept at each update.
pub const BN_MOMENTUM: f64 = 0.9;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pointwise {
    Relu,
    Tanh,
    Sigmoid,
}

/// Per-channel running mean and variance of a batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Element> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }
}

pub enum NormMode<'a, T> {
    /// Normalize with batch statistics and update the running estimates.
    Train(&'a mut RunningStats<T>),
    /// Normalize with the running estimates.
    Eval(&'a RunningStats<T>),
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Sum(Var),
    Pointwise(Var, Pointwise),
    Conv2d {
        input: Var,
        weight: Var,
        geom: ConvGeom,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    ChannelScale {
        input: Var,
        scale: Var,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    GlobalAvgPool(Var),
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
}

/// One tape entry: a value, its gradient once populated, and how it was made.
pub struct GradNode<T> {
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

impl<T: Element> GradNode<T> {
    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn grad(&self) -> Option<&Tensor<T>> {
        self.grad.as_ref()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn parents(&self) -> Vec<Var> {
        parents_of(&self.op)
    }
}

fn parents_of<T>(op: &Op<T>) -> Vec<Var> {
    match op {
        Op::Leaf => vec![],
        Op::Add(a, b) | Op::Mul(a, b) => vec![*a, *b],
        Op::Sum(a) | Op::Pointwise(a, _) | Op::GlobalAvgPool(a) => vec![*a],
        Op::Conv2d { input, weight, .. } => vec![*input, *weight],
        Op::BatchNorm {
            input, gamma, beta, ..
        } => vec![*input, *gamma, *beta],
        Op::ChannelScale { input, scale } => vec![*input, *scale],
        Op::Linear {
            input,
            weight,
            bias,
        } => {
            let mut v = vec![*input, *weight];
            v.extend(bias.iter().copied());
            v
        }
        Op::MaxPool { input, .. } => vec![*input],
        Op::SoftmaxCrossEntropy { logits, .. } => vec![*logits],
    }
}

/// A single forward/backward tape.
pub struct Graph<T> {
    nodes: Vec<GradNode<T>>,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, v: Var) -> &GradNode<T> {
        &self.nodes[v.0]
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Leaf whose gradient is tracked.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(GradNode {
            value,
            grad: None,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let requires_grad = parents_of(&op).iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(GradNode {
            value,
            grad: None,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p + q).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p * q).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum();
        Ok(self.push(Tensor::scalar(s), Op::Sum(a)))
    }

    pub fn pointwise(&mut self, a: Var, f: Pointwise) -> Result<Var> {
        let x = self.value(a);
        let out = match f {
            Pointwise::Relu => x.map(|v| if v > T::zero() { v } else { T::zero() }),
            Pointwise::Tanh => x.map(|v| v.tanh()),
            Pointwise::Sigmoid => x.map(|v| T::one() / (T::one() + (-v).exp())),
        };
        Ok(self.push(out, Op::Pointwise(a, f)))
    }

    /// Fingerprint of the linear pieces selected so far: the sign of every
    /// ReLU input and every max-pool winner. Two evaluations with equal
    /// fingerprints took the same branch of each piecewise op.
    pub fn kink_pattern(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Pointwise(input, Pointwise::Relu) => {
                    for v in self.nodes[input.0].value.data() {
                        (*v > T::zero()).hash(&mut h);
                    }
                }
                Op::MaxPool { argmax, .. } => argmax.hash(&mut h),
                _ => {}
            }
        }
        h.finish()
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.pointwise(a, Pointwise::Relu)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.pointwise(a, Pointwise::Tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.pointwise(a, Pointwise::Sigmoid)
    }

    /// Cross-correlation of `input[N,Cin,H,W]` with `weight[Cout,Cin,kh,kw]`, no bias.
    pub fn conv2d(&mut self, input: Var, weight: Var, stride: usize, pad: usize) -> Result<Var> {
        let [n, cin, h, w] = self.value(input).dims4("conv2d")?;
        let [cout, wcin, kh, kw] = self.value(weight).dims4("conv2d")?;
        if wcin != cin {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "input {:?} has {cin} channels but weight {:?} expects {wcin}",
                    self.value(input).shape(),
                    self.value(weight).shape()
                ),
            ));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d", "stride must be at least 1"));
        }
        if kh > h + 2 * pad || kw > w + 2 * pad {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {kh}×{kw} larger than padded input {}×{}", h + 2 * pad, w + 2 * pad),
            ));
        }
        let geom = ConvGeom {
            n,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            stride,
            pad,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (w + 2 * pad - kw) / stride + 1,
        };
        let data = kernels::conv2d_forward(self.value(input).data(), self.value(weight).data(), &geom);
        let out = Tensor::new([n, cout, geom.ho, geom.wo], data)?;
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                weight,
                geom,
            },
        ))
    }

    /// Per-channel batch normalization of `input[N,C,H,W]`.
    pub fn batch_norm(&mut self, input: Var, gamma: Var, beta: Var, mode: NormMode<'_, T>) -> Result<Var> {
        let [n, c, h, w] = self.value(input).dims4("batch_norm")?;
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.value(v).shape() != [c] {
                return Err(Error::shape(
                    "batch_norm",
                    format!("{name} {:?} does not match {c} input channels", self.value(v).shape()),
                ));
            }
        }
        let hw = h * w;
        let m = n * hw;
        let x = self.value(input).data();
        let eps = T::of(BN_EPS);
        let (mean, var, batch_stats) = match &mode {
            NormMode::Train(stats) => {
                if stats.channels() != c {
                    return Err(Error::shape("batch_norm", "running stats channel count"));
                }
                if m < 2 {
                    return Err(Error::invalid("batch_norm", "train mode needs N·H·W ≥ 2"));
                }
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for ch in 0..c {
                    let mut s = T::zero();
                    for i in 0..n {
                        s = s + x[(i * c + ch) * hw..(i * c + ch + 1) * hw].iter().copied().sum();
                    }
                    let mu = s / T::of(m as f64);
                    let mut q = T::zero();
                    for i in 0..n {
                        for &v in &x[(i * c + ch) * hw..(i * c + ch + 1) * hw] {
                            q = q + (v - mu) * (v - mu);
                        }
                    }
                    mean[ch] = mu;
                    var[ch] = q / T::of(m as f64);
                }
                (mean, var, true)
            }
            NormMode::Eval(stats) => {
                if stats.channels() != c {
                    return Err(Error::shape("batch_norm", "running stats channel count"));
                }
                (stats.mean.clone(), stats.var.clone(), false)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![T::zero(); x.len()];
        let mut out = vec![T::zero(); x.len()];
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * hw;
                for k in base..base + hw {
                    let xh = (x[k] - mean[ch]) * inv_std[ch];
                    xhat[k] = xh;
                    out[k] = g[ch] * xh + b[ch];
                }
            }
        }
        if let NormMode::Train(stats) = mode {
            let keep = T::of(BN_MOMENTUM);
            let unbiased = T::of(m as f64 / (m as f64 - 1.0));
            for ch in 0..c {
                stats.mean[ch] = keep * stats.mean[ch] + (T::one() - keep) * mean[ch];
                stats.var[ch] = keep * stats.var[ch] + (T::one() - keep) * var[ch] * unbiased;
            }
        }
        let out = Tensor::new([n, c, h, w], out)?;
        Ok(self.push(
            out,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
        ))
    }

    /// `out[n,c,h,w] = scale[c] · input[n,c,h,w]`.
    pub fn channel_scale(&mut self, input: Var, scale: Var) -> Result<Var> {
        let [_, c, h, w] = self.value(input).dims4("channel_scale")?;
        if self.value(scale).shape() != [c] {
            return Err(Error::shape(
                "channel_scale",
                format!("scale {:?} does not match {c} input channels", self.value(scale).shape()),
            ));
        }
        let a = self.value(scale).data();
        let x = self.value(input);
        let hw = h * w;
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| a[(i / hw) % c] * v)
            .collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push(out, Op::ChannelScale { input, scale }))
    }

    /// `x[N,D] · weightᵀ + bias` with `weight[K,D]`, `bias[K]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let [n, d] = self.value(input).dims2("linear")?;
        let [k, wd] = self.value(weight).dims2("linear")?;
        if wd != d {
            return Err(Error::shape(
                "linear",
                format!(
                    "input {:?} vs weight {:?}",
                    self.value(input).shape(),
                    self.value(weight).shape()
                ),
            ));
        }
        if let Some(b) = bias {
            if self.value(b).shape() != [k] {
                return Err(Error::shape(
                    "linear",
                    format!("bias {:?} vs {k} outputs", self.value(b).shape()),
                ));
            }
        }
        let mut out = vec![T::zero(); n * k];
        if let Some(b) = bias {
            let bv = self.value(b).data();
            for row in out.chunks_mut(k) {
                row.copy_from_slice(bv);
            }
        }
        T::gemm(
            n,
            d,
            k,
            T::one(),
            self.value(input).data(),
            (d as isize, 1),
            self.value(weight).data(),
            (1, d as isize),
            T::one(),
            &mut out,
            (k as isize, 1),
        );
        let out = Tensor::new([n, k], out)?;
        Ok(self.push(
            out,
            Op::Linear {
                input,
                weight,
                bias,
            },
        ))
    }

    pub fn maxpool(&mut self, input: Var, kernel: usize, stride: usize, pad: usize) -> Result<Var> {
        let [n, c, h, w] = self.value(input).dims4("maxpool")?;
        if kernel == 0 || stride == 0 || kernel > h + 2 * pad || kernel > w + 2 * pad || pad >= kernel {
            return Err(Error::invalid(
                "maxpool",
                format!("kernel {kernel}, stride {stride}, pad {pad} invalid for {h}×{w}"),
            ));
        }
        let geom = PoolGeom {
            n,
            c,
            h,
            w,
            k: kernel,
            stride,
            pad,
            ho: (h + 2 * pad - kernel) / stride + 1,
            wo: (w + 2 * pad - kernel) / stride + 1,
        };
        let (data, argmax) = kernels::maxpool_forward(self.value(input).data(), &geom);
        let out = Tensor::new([n, c, geom.ho, geom.wo], data)?;
        Ok(self.push(out, Op::MaxPool { input, argmax }))
    }

    /// Mean over H and W: `[N,C,H,W] → [N,C]`.
    pub fn global_avgpool(&mut self, input: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(input).dims4("global_avgpool")?;
        let hw = h * w;
        let denom = T::of(hw as f64);
        let data = self
            .value(input)
            .data()
            .chunks(hw)
            .map(|plane| plane.iter().copied().sum::<T>() / denom)
            .collect();
        let out = Tensor::new([n, c], data)?;
        Ok(self.push(out, Op::GlobalAvgPool(input)))
    }

    /// Batch mean of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let [n, k] = self.value(logits).dims2("softmax_cross_entropy")?;
        if labels.len() != n {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("{} labels for batch of {n}", labels.len()),
            ));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::LabelOutOfRange { label, classes: k });
        }
        let z = self.value(logits).data();
        let mut probs = vec![T::zero(); n * k];
        let mut loss = T::zero();
        for i in 0..n {
            let row = &z[i * k..(i + 1) * k];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut denom = T::zero();
            for (j, &v) in row.iter().enumerate() {
                let e = (v - max).exp();
                probs[i * k + j] = e;
                denom = denom + e;
            }
            for p in &mut probs[i * k..(i + 1) * k] {
                *p = *p / denom;
            }
            loss = loss + (denom.ln() + max - row[labels[i]]);
        }
        let loss = loss / T::of(n as f64);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Populates gradients of every node reachable from the scalar `loss`.
    ///
    /// Existing gradients are cleared first, so calling this twice on the same
    /// tape gives the same result.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::NonScalar(self.value(loss).shape().to_vec()));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        let seed = Tensor::full(self.value(loss).shape().to_vec(), T::one());
        self.nodes[loss.0].grad = Some(seed);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(gy) = self.nodes[i].grad.take() else {
                continue;
            };
            let contributions = self.local_grads(i, &gy);
            self.nodes[i].grad = Some(gy);
            for (parent, g) in contributions {
                let slot = &mut self.nodes[parent.0].grad;
                match slot {
                    None => *slot = Some(g),
                    Some(acc) => acc
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .for_each(|(a, &b)| *a = *a + b),
                }
            }
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn like(&self, v: Var, data: Vec<T>) -> Tensor<T> {
        Tensor::new(self.value(v).shape().to_vec(), data).expect("gradient shape")
    }

    fn local_grads(&self, i: usize, gy: &Tensor<T>) -> Vec<(Var, Tensor<T>)> {
        let node = &self.nodes[i];
        let g = gy.data();
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for p in [*a, *b] {
                    if self.wants(p) {
                        out.push((p, gy.clone()));
                    }
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    out.push((*a, self.like(*a, g.iter().zip(vb).map(|(&d, &y)| d * y).collect())));
                }
                if self.wants(*b) {
                    out.push((*b, self.like(*b, g.iter().zip(va).map(|(&d, &x)| d * x).collect())));
                }
            }
            Op::Sum(a) => {
                if self.wants(*a) {
                    out.push((*a, Tensor::full(self.value(*a).shape().to_vec(), g[0])));
                }
            }
            Op::Pointwise(a, f) => {
                if self.wants(*a) {
                    let y = node.value.data();
                    let dx = g
                        .iter()
                        .zip(y)
                        .map(|(&d, &y)| match f {
                            Pointwise::Relu => {
                                if y > T::zero() {
                                    d
                                } else {
                                    T::zero()
                                }
                            }
                            Pointwise::Tanh => d * (T::one() - y * y),
                            Pointwise::Sigmoid => d * y * (T::one() - y),
                        })
                        .collect();
                    out.push((*a, self.like(*a, dx)));
                }
            }
            Op::Conv2d {
                input,
                weight,
                geom,
            } => {
                let (dx, dw) = kernels::conv2d_backward(
                    self.value(*input).data(),
                    self.value(*weight).data(),
                    g,
                    geom,
                    self.wants(*input),
                    self.wants(*weight),
                );
                if let Some(dx) = dx {
                    out.push((*input, self.like(*input, dx)));
                }
                if let Some(dw) = dw {
                    out.push((*weight, self.like(*weight, dw)));
                }
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let s = self.value(*input).shape();
                let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
                let m = T::of((n * hw) as f64);
                let gm = self.value(*gamma).data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for i in 0..n {
                    for ch in 0..c {
                        let base = (i * c + ch) * hw;
                        for k in base..base + hw {
                            dgamma[ch] = dgamma[ch] + g[k] * xhat[k];
                            dbeta[ch] = dbeta[ch] + g[k];
                        }
                    }
                }
                if self.wants(*input) {
                    let mut dx = vec![T::zero(); g.len()];
                    for i in 0..n {
                        for ch in 0..c {
                            let base = (i * c + ch) * hw;
                            for k in base..base + hw {
                                dx[k] = if *batch_stats {
                                    gm[ch] * inv_std[ch] * (g[k] - dbeta[ch] / m - xhat[k] * dgamma[ch] / m)
                                } else {
                                    gm[ch] * inv_std[ch] * g[k]
                                };
                            }
                        }
                    }
                    out.push((*input, self.like(*input, dx)));
                }
                if self.wants(*gamma) {
                    out.push((*gamma, self.like(*gamma, dgamma)));
                }
                if self.wants(*beta) {
                    out.push((*beta, self.like(*beta, dbeta)));
                }
            }
            Op::ChannelScale { input, scale } => {
                let s = self.value(*input).shape();
                let (c, hw) = (s[1], s[2] * s[3]);
                let a = self.value(*scale).data();
                if self.wants(*input) {
                    let dx = g.iter().enumerate().map(|(i, &d)| a[(i / hw) % c] * d).collect();
                    out.push((*input, self.like(*input, dx)));
                }
                if self.wants(*scale) {
                    let x = self.value(*input).data();
                    let mut da = vec![T::zero(); c];
                    for (i, (&d, &v)) in g.iter().zip(x).enumerate() {
                        let ch = (i / hw) % c;
                        da[ch] = da[ch] + d * v;
                    }
                    out.push((*scale, self.like(*scale, da)));
                }
            }
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let [n, d] = self.value(*input).dims2("linear").expect("rank 2");
                let k = self.value(*weight).shape()[0];
                if self.wants(*input) {
                    let mut dx = vec![T::zero(); n * d];
                    T::gemm(
                        n,
                        k,
                        d,
                        T::one(),
                        g,
                        (k as isize, 1),
                        self.value(*weight).data(),
                        (d as isize, 1),
                        T::zero(),
                        &mut dx,
                        (d as isize, 1),
                    );
                    out.push((*input, self.like(*input, dx)));
                }
                if self.wants(*weight) {
                    let mut dw = vec![T::zero(); k * d];
                    T::gemm(
                        k,
                        n,
                        d,
                        T::one(),
                        g,
                        (1, k as isize),
                        self.value(*input).data(),
                        (d as isize, 1),
                        T::zero(),
                        &mut dw,
                        (d as isize, 1),
                    );
                    out.push((*weight, self.like(*weight, dw)));
                }
                if let Some(b) = bias {
                    if self.wants(*b) {
                        let mut db = vec![T::zero(); k];
                        for row in g.chunks(k) {
                            db.iter_mut().zip(row).for_each(|(a, &v)| *a = *a + v);
                        }
                        out.push((*b, self.like(*b, db)));
                    }
                }
            }
            Op::MaxPool { input, argmax } => {
                if self.wants(*input) {
                    let mut dx = vec![T::zero(); self.value(*input).numel()];
                    for (&src, &d) in argmax.iter().zip(g) {
                        dx[src] = dx[src] + d;
                    }
                    out.push((*input, self.like(*input, dx)));
                }
            }
            Op::GlobalAvgPool(a) => {
                if self.wants(*a) {
                    let s = self.value(*a).shape();
                    let hw = s[2] * s[3];
                    let scale = T::one() / T::of(hw as f64);
                    let dx = (0..self.value(*a).numel()).map(|i| g[i / hw] * scale).collect();
                    out.push((*a, self.like(*a, dx)));
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                if self.wants(*logits) {
                    let n = labels.len();
                    let k = probs.len() / n;
                    let scale = g[0] / T::of(n as f64);
                    let mut dz: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                    for (i, &l) in labels.iter().enumerate() {
                        dz[i * k + l] = dz[i * k + l] - scale;
                    }
                    out.push((*logits, self.like(*logits, dz)));
                }
            }
        }
        out
    }
}
