//! Layer families built from tape operations: residual, cross-residual,
//! highway, and the feed-forward LSTM cell.
//!
//! All of them share one shape, `y = post(F(x) + shortcut(x))`, and differ
//! in how the shortcut is formed:
//!
//! * residual: one shortcut, identity or a 1×1 projection;
//! * cross-residual: task `t` sums shortcuts from every task input
//!   `x^(j)`, each weighted by its own `(j → t)` cross weight;
//! * highway: the residual and shortcut terms are gated by `T(x)` and `C(x)`;
//! * feed-forward LSTM: the cell state `c = f·c_prev + i·tanh(W x + b)`.
//!
//! Forcing the gates on (or the cross weights to zero) collapses each family
//! onto the plain residual block; the reduction tests rely on the additions
//! being issued in the same order so the results are bitwise equal.

use crate::error::{Error, Result};
use crate::tensor::{Element, Graph, NormMode, Pointwise, RunningStats, Var};

/// One forward evaluation: the tape, the norm mode, and the running
/// statistics that batch-norm layers read or update.
pub struct Pass<'a, T> {
    pub graph: &'a mut Graph<T>,
    pub stats: &'a mut [RunningStats<T>],
    pub train: bool,
}

impl<'a, T: Element> Pass<'a, T> {
    pub fn new(graph: &'a mut Graph<T>, stats: &'a mut [RunningStats<T>], train: bool) -> Self {
        Pass { graph, stats, train }
    }

    pub fn norm(&mut self, x: Var, p: &NormParams) -> Result<Var> {
        let stats = self
            .stats
            .get_mut(p.stats)
            .ok_or_else(|| Error::invalid("batch_norm", format!("no running stats slot {}", p.stats)))?;
        let mode = if self.train {
            NormMode::Train(stats)
        } else {
            NormMode::Eval(stats)
        };
        self.graph.batch_norm(x, p.gamma, p.beta, mode)
    }
}

/// Batch-norm parameters plus the index of its running statistics.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormParams {
    pub gamma: Var,
    pub beta: Var,
    pub stats: usize,
}

/// The learned mapping `F(x, {W_i})` of a block.
pub trait Mapping<T: Element> {
    fn apply(&self, pass: &mut Pass<'_, T>, x: Var) -> Result<Var>;
}

/// Convolution, then optional batch norm, then optional activation.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvUnit {
    pub weight: Var,
    pub stride: usize,
    pub pad: usize,
    pub norm: Option<NormParams>,
    pub act: Option<Pointwise>,
}

impl ConvUnit {
    fn apply<T: Element>(&self, pass: &mut Pass<'_, T>, x: Var) -> Result<Var> {
        let mut y = pass.graph.conv2d(x, self.weight, self.stride, self.pad)?;
        if let Some(norm) = &self.norm {
            y = pass.norm(y, norm)?;
        }
        if let Some(act) = self.act {
            y = pass.graph.pointwise(y, act)?;
        }
        Ok(y)
    }
}

/// An ordered stack of conv units.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvStack {
    pub units: Vec<ConvUnit>,
}

impl ConvStack {
    /// `1×1 → 3×3 → 1×1`, each followed by its norm, ReLU after the first two.
    /// The stride sits on the first 1×1 convolution. `last_norm = None`
    /// leaves the third convolution unnormalized (the norm then lives after
    /// the addition).
    pub fn bottleneck(weights: [Var; 3], norms: [NormParams; 2], last_norm: Option<NormParams>, stride: usize) -> Self {
        ConvStack {
            units: vec![
                ConvUnit {
                    weight: weights[0],
                    stride,
                    pad: 0,
                    norm: Some(norms[0]),
                    act: Some(Pointwise::Relu),
                },
                ConvUnit {
                    weight: weights[1],
                    stride: 1,
                    pad: 1,
                    norm: Some(norms[1]),
                    act: Some(Pointwise::Relu),
                },
                ConvUnit {
                    weight: weights[2],
                    stride: 1,
                    pad: 0,
                    norm: last_norm,
                    act: None,
                },
            ],
        }
    }
}

impl<T: Element> Mapping<T> for ConvStack {
    fn apply(&self, pass: &mut Pass<'_, T>, mut x: Var) -> Result<Var> {
        for unit in &self.units {
            x = unit.apply(pass, x)?;
        }
        Ok(x)
    }
}

/// `act(x · Wᵀ + b)` on `[N, D]` features.
#[derive(Clone, Debug, PartialEq)]
pub struct Affine {
    pub weight: Var,
    pub bias: Option<Var>,
    pub act: Option<Pointwise>,
}

impl<T: Element> Mapping<T> for Affine {
    fn apply(&self, pass: &mut Pass<'_, T>, x: Var) -> Result<Var> {
        let y = pass.graph.linear(x, self.weight, self.bias)?;
        match self.act {
            Some(act) => pass.graph.pointwise(y, act),
            None => Ok(y),
        }
    }
}

/// 1×1 convolution with optional batch norm, used where dimensions change.
#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    pub weight: Var,
    pub stride: usize,
    pub norm: Option<NormParams>,
}

impl Projection {
    fn apply<T: Element>(&self, pass: &mut Pass<'_, T>, x: Var) -> Result<Var> {
        let y = pass.graph.conv2d(x, self.weight, self.stride, 0)?;
        match &self.norm {
            Some(norm) => pass.norm(y, norm),
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Shortcut {
    Identity,
    Projection(Projection),
}

impl Shortcut {
    /// Whether the "B option" rule calls for a projection: only when the
    /// stride or the channel count changes.
    pub fn needs_projection(in_channels: usize, out_channels: usize, stride: usize) -> bool {
        stride != 1 || in_channels != out_channels
    }
}

/// What follows the elementwise addition.
#[derive(Clone, Debug, PartialEq)]
pub enum PostActivation {
    None,
    Relu,
    /// Batch norm then ReLU.
    NormRelu(NormParams),
}

impl PostActivation {
    fn apply<T: Element>(&self, pass: &mut Pass<'_, T>, x: Var) -> Result<Var> {
        match self {
            PostActivation::None => Ok(x),
            PostActivation::Relu => pass.graph.relu(x),
            PostActivation::NormRelu(norm) => {
                let y = pass.norm(x, norm)?;
                pass.graph.relu(y)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResidualBlockParams<M = ConvStack> {
    pub path: M,
    pub shortcut: Shortcut,
    pub post: PostActivation,
}

/// `y = post(F(x) + W_s x)`.
pub fn residual_block<T: Element, M: Mapping<T>>(
    pass: &mut Pass<'_, T>,
    x: Var,
    p: &ResidualBlockParams<M>,
) -> Result<Var> {
    let fx = p.path.apply(pass, x)?;
    let skip = match &p.shortcut {
        Shortcut::Identity => {
            let (xs, fs) = (pass.graph.value(x).shape(), pass.graph.value(fx).shape());
            if xs != fs {
                return Err(Error::shape(
                    "residual_block",
                    format!("identity shortcut needs equal shapes, input {xs:?} vs residual {fs:?}"),
                ));
            }
            x
        }
        Shortcut::Projection(proj) => proj.apply(pass, x)?,
    };
    let y = pass.graph.add(fx, skip)?;
    p.post.apply(pass, y)
}

/// Weight on one `(source → target)` shortcut of a cross-residual block.
#[derive(Clone, Debug, PartialEq)]
pub enum CrossWeight {
    /// No connection.
    Zero,
    Identity,
    /// Per-channel scaling `a ⊙ x`; `C` parameters.
    ChannelScale(Var),
    Projection(Projection),
}

#[derive(Clone, Debug, PartialEq)]
pub struct CrossResidualBlockParams<M = ConvStack> {
    /// Per-task residual mapping `F^(t)`.
    pub paths: Vec<M>,
    /// Per-task activation after the sum.
    pub posts: Vec<PostActivation>,
    /// `weights[target][source]`.
    pub weights: Vec<Vec<CrossWeight>>,
}

impl<M> CrossResidualBlockParams<M> {
    pub fn tasks(&self) -> usize {
        self.paths.len()
    }

    pub fn weight(&self, source: usize, target: usize) -> &CrossWeight {
        &self.weights[target][source]
    }
}

/// `y^(t) = post_t(F^(t)(x^(t)) + Σ_j W^(j→t) x^(j))` for every task `t`.
pub fn cross_residual_block<T: Element, M: Mapping<T>>(
    pass: &mut Pass<'_, T>,
    xs: &[Var],
    p: &CrossResidualBlockParams<M>,
) -> Result<Vec<Var>> {
    let n = p.tasks();
    if n == 0 || xs.len() != n || p.posts.len() != n || p.weights.len() != n || p.weights.iter().any(|r| r.len() != n) {
        return Err(Error::invalid(
            "cross_residual_block",
            format!(
                "{} inputs for {n} task paths, {} posts and a {}-row weight table",
                xs.len(),
                p.posts.len(),
                p.weights.len()
            ),
        ));
    }
    let shape = pass.graph.value(xs[0]).shape().to_vec();
    if let Some(bad) = xs.iter().find(|&&x| pass.graph.value(x).shape() != shape) {
        return Err(Error::shape(
            "cross_residual_block",
            format!("task inputs differ: {shape:?} vs {:?}", pass.graph.value(*bad).shape()),
        ));
    }

    let mut outputs = Vec::with_capacity(n);
    for t in 0..n {
        let mut acc = p.paths[t].apply(pass, xs[t])?;
        for (j, &xj) in xs.iter().enumerate() {
            let term = match p.weight(j, t) {
                CrossWeight::Zero => continue,
                CrossWeight::Identity => xj,
                CrossWeight::ChannelScale(a) => pass.graph.channel_scale(xj, *a)?,
                CrossWeight::Projection(proj) => proj.apply(pass, xj)?,
            };
            let (fs, ts) = (pass.graph.value(acc).shape(), pass.graph.value(term).shape());
            if fs != ts {
                return Err(Error::shape(
                    "cross_residual_block",
                    format!("cross weight {j}→{t} yields {ts:?} but the residual is {fs:?}"),
                ));
            }
            acc = pass.graph.add(acc, term)?;
        }
        outputs.push(p.posts[t].apply(pass, acc)?);
    }
    Ok(outputs)
}

/// A highway gate: forced fully on, fully off, or `σ(W x + b)`.
#[derive(Clone, Debug, PartialEq)]
pub enum Gate {
    On,
    Off,
    Learned { weight: Var, bias: Var },
}

impl Gate {
    fn apply<T: Element>(&self, pass: &mut Pass<'_, T>, x: Var, target: Var) -> Result<Option<Var>> {
        match self {
            Gate::On => Ok(Some(target)),
            Gate::Off => Ok(None),
            Gate::Learned { weight, bias } => {
                let z = pass.graph.linear(x, *weight, Some(*bias))?;
                let gate = pass.graph.sigmoid(z)?;
                Ok(Some(pass.graph.mul(target, gate)?))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HighwayParams<M = Affine> {
    /// The transform `H(x, W_H)`.
    pub transform: M,
    /// Transform gate `T(x, W_T)`.
    pub transform_gate: Gate,
    /// Carry gate `C(x, W_C)`.
    pub carry_gate: Gate,
}

/// `y = H(x)·T(x) + x·C(x)`.
pub fn highway_layer<T: Element, M: Mapping<T>>(pass: &mut Pass<'_, T>, x: Var, p: &HighwayParams<M>) -> Result<Var> {
    let h = p.transform.apply(pass, x)?;
    let (hs, xs) = (pass.graph.value(h).shape(), pass.graph.value(x).shape());
    if hs != xs {
        return Err(Error::shape("highway_layer", format!("transform output {hs:?} vs input {xs:?}")));
    }
    let moved = p.transform_gate.apply(pass, x, h)?;
    let carried = p.carry_gate.apply(pass, x, x)?;
    match (moved, carried) {
        (Some(a), Some(b)) => pass.graph.add(a, b),
        (Some(a), None) => Ok(a),
        (None, Some(b)) => Ok(b),
        (None, None) => {
            let zeros = crate::tensor::Tensor::zeros(pass.graph.value(x).shape().to_vec());
            Ok(pass.graph.constant(zeros))
        }
    }
}

/// Input-side weights and bias of one LSTM gate.
#[derive(Clone, Debug, PartialEq)]
pub struct GateWeights {
    pub weight: Var,
    pub bias: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LstmCellParams {
    pub input: GateWeights,
    pub forget: GateWeights,
    pub cell: GateWeights,
    pub output: GateWeights,
    /// Recurrent weights `[W_hi, W_hf, W_hc, W_ho]`, used only with `h_prev`.
    pub recurrent: Option<[Var; 4]>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GateMode {
    Learned,
    /// `i = f = o = 1`.
    ForcedOn,
}

/// One feed-forward LSTM step; returns `(c, h)`.
///
/// With [`GateMode::ForcedOn`] and `c_prev = x` this is `c = x + tanh(W_xc x + b_c)`,
/// a residual layer with identity shortcut.
pub fn lstm_ff_cell<T: Element>(
    pass: &mut Pass<'_, T>,
    x: Var,
    c_prev: Var,
    h_prev: Option<Var>,
    p: &LstmCellParams,
    mode: GateMode,
) -> Result<(Var, Var)> {
    let pre = |pass: &mut Pass<'_, T>, w: &GateWeights, k: usize| -> Result<Var> {
        let z = pass.graph.linear(x, w.weight, Some(w.bias))?;
        match (h_prev, &p.recurrent) {
            (Some(h), Some(rec)) => {
                let r = pass.graph.linear(h, rec[k], None)?;
                pass.graph.add(z, r)
            }
            (Some(_), None) => Err(Error::invalid("lstm_ff_cell", "h_prev given without recurrent weights")),
            _ => Ok(z),
        }
    };
    let cz = pre(pass, &p.cell, 2)?;
    let candidate = pass.graph.tanh(cz)?;
    if pass.graph.value(candidate).shape() != pass.graph.value(c_prev).shape() {
        return Err(Error::shape(
            "lstm_ff_cell",
            format!(
                "cell state {:?} vs candidate {:?}",
                pass.graph.value(c_prev).shape(),
                pass.graph.value(candidate).shape()
            ),
        ));
    }
    match mode {
        GateMode::ForcedOn => {
            let c = pass.graph.add(c_prev, candidate)?;
            let h = pass.graph.tanh(c)?;
            Ok((c, h))
        }
        GateMode::Learned => {
            let iz = pre(pass, &p.input, 0)?;
            let i = pass.graph.sigmoid(iz)?;
            let fz = pre(pass, &p.forget, 1)?;
            let f = pass.graph.sigmoid(fz)?;
            let oz = pre(pass, &p.output, 3)?;
            let o = pass.graph.sigmoid(oz)?;
            let kept = pass.graph.mul(f, c_prev)?;
            let written = pass.graph.mul(i, candidate)?;
            let c = pass.graph.add(kept, written)?;
            let tc = pass.graph.tanh(c)?;
            let h = pass.graph.mul(o, tc)?;
            Ok((c, h))
        }
    }
}
