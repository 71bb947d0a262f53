//! SGD with momentum and weight decay, the plateau learning-rate rule,
//! the multitask loss, top-k metrics and the training loop.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::arch::{Network, ParamTable, Variant};
use crate::checkpoint;
use crate::data::{Dataset, TASK_NAMES};
use crate::error::{Error, Result};
use crate::tensor::{finite_diff_check, Element, GradCheckOptions, GradCheckReport, Graph, Objective, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_drop_factor: f64,
    pub plateau_window: usize,
    /// Relative improvement of the best eval loss that counts as progress.
    pub plateau_min_rel: f64,
    /// Learning-rate drops before training stops.
    pub max_drops: usize,
    pub epochs: usize,
    pub seed: u64,
    pub flip: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 24,
            lr: 1e-3,
            momentum: 0.9,
            weight_decay: 1e-4,
            lr_drop_factor: 10.0,
            plateau_window: 3,
            plateau_min_rel: 1e-3,
            max_drops: 3,
            epochs: 30,
            seed: 0,
            flip: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.batch_size < 2 {
            return Err("batch_size must be at least 2 for batch statistics".into());
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err("lr must be positive".into());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err("momentum must lie in [0, 1)".into());
        }
        if !(self.weight_decay >= 0.0) {
            return Err("weight_decay must be non-negative".into());
        }
        if !(self.lr_drop_factor > 1.0) {
            return Err("lr_drop_factor must exceed 1".into());
        }
        if self.plateau_window == 0 {
            return Err("plateau_window must be positive".into());
        }
        if !(self.plateau_min_rel >= 0.0) {
            return Err("plateau_min_rel must be non-negative".into());
        }
        if self.epochs == 0 {
            return Err("epochs must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EvalConfig {
    /// Optimizer steps between evaluations; 0 evaluates once per epoch.
    pub interval: usize,
    pub batch_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            interval: 0,
            batch_size: 100,
        }
    }
}

/// `Σ_t CE(logits_t, labels_t)`, unweighted.
pub fn multitask_loss<T: Element>(g: &mut Graph<T>, logits: &[Var], labels: &[Vec<usize>]) -> Result<Var> {
    if logits.len() != labels.len() || logits.is_empty() {
        return Err(Error::invalid(
            "multitask_loss",
            format!("{} logits tensors for {} label sets", logits.len(), labels.len()),
        ));
    }
    let mut total = g.softmax_cross_entropy(logits[0], &labels[0])?;
    for (&l, y) in logits.iter().zip(labels).skip(1) {
        let ce = g.softmax_cross_entropy(l, y)?;
        total = g.add(total, ce)?;
    }
    Ok(total)
}

/// Momentum buffers for `v ← μv + g + λw`, `w ← w − lr·v`.
#[derive(Clone, Debug)]
pub struct Sgd<T> {
    velocity: Vec<Vec<T>>,
}

impl<T: Element> Sgd<T> {
    pub fn new<U: Element>(params: &ParamTable<U>) -> Self {
        Sgd {
            velocity: params.iter().map(|(_, p)| vec![T::zero(); p.value.numel()]).collect(),
        }
    }

    /// Applies one update. `grads[i] = None` means a zero gradient. Decay
    /// only touches kinds for which [`ParamKind::decays`] holds.
    ///
    /// [`ParamKind::decays`]: crate::arch::ParamKind::decays
    pub fn step(&mut self, params: &mut ParamTable<T>, grads: &[Option<&Tensor<T>>], lr: f64, momentum: f64, weight_decay: f64) {
        let (lr, mu) = (T::of(lr), T::of(momentum));
        for (i, (_, p)) in params.iter_mut().enumerate() {
            let decay = if p.kind.decays() { T::of(weight_decay) } else { T::zero() };
            let v = &mut self.velocity[i];
            let w = p.value.data_mut();
            match grads.get(i).copied().flatten() {
                Some(g) => {
                    for ((vk, wk), &gk) in v.iter_mut().zip(w.iter_mut()).zip(g.data()) {
                        *vk = mu * *vk + gk + decay * *wk;
                        *wk = *wk - lr * *vk;
                    }
                }
                None => {
                    for (vk, wk) in v.iter_mut().zip(w.iter_mut()) {
                        *vk = mu * *vk + decay * *wk;
                        *wk = *wk - lr * *vk;
                    }
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlateauEvent {
    Continue,
    Dropped,
    /// The drop budget is exhausted and the loss plateaued again.
    Stop,
}

/// Divides the learning rate whenever the best eval loss has failed to
/// improve by more than `min_rel` (relative) for `window` consecutive evals.
#[derive(Clone, Debug, PartialEq)]
pub struct PlateauSchedule {
    pub lr: f64,
    factor: f64,
    window: usize,
    min_rel: f64,
    max_drops: usize,
    best: Option<f64>,
    stale: usize,
    drops: usize,
}

impl PlateauSchedule {
    pub fn new(cfg: &TrainConfig) -> Self {
        PlateauSchedule {
            lr: cfg.lr,
            factor: cfg.lr_drop_factor,
            window: cfg.plateau_window,
            min_rel: cfg.plateau_min_rel,
            max_drops: cfg.max_drops,
            best: None,
            stale: 0,
            drops: 0,
        }
    }

    pub fn drops(&self) -> usize {
        self.drops
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }

    pub fn observe(&mut self, loss: f64) -> PlateauEvent {
        match self.best {
            Some(best) if loss >= best * (1.0 - self.min_rel) => self.stale += 1,
            _ => {
                self.best = Some(loss);
                self.stale = 0;
                return PlateauEvent::Continue;
            }
        }
        if self.stale < self.window {
            return PlateauEvent::Continue;
        }
        self.stale = 0;
        if self.drops == self.max_drops {
            return PlateauEvent::Stop;
        }
        self.drops += 1;
        self.lr /= self.factor;
        PlateauEvent::Dropped
    }
}

/// Percentage of rows whose label ranks among the `k` highest scores.
/// Equal scores rank the lower class index first.
pub fn topk_accuracy<T: Element>(scores: &Tensor<T>, labels: &[usize], k: usize) -> Result<f64> {
    let [n, classes] = scores.dims2("topk_accuracy")?;
    if k == 0 || k > classes {
        return Err(Error::invalid("topk_accuracy", format!("k = {k} outside 1..={classes}")));
    }
    if labels.len() != n {
        return Err(Error::shape("topk_accuracy", format!("{} labels for {n} rows", labels.len())));
    }
    let mut hits = 0usize;
    for (row, &y) in scores.data().chunks(classes).zip(labels) {
        if y >= classes {
            return Err(Error::LabelOutOfRange { label: y, classes });
        }
        let sy = row[y];
        let rank = row
            .iter()
            .enumerate()
            .filter(|&(j, &s)| s > sy || (s == sy && j < y))
            .count();
        if rank < k {
            hits += 1;
        }
    }
    Ok(100.0 * hits as f64 / n as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRecord {
    pub step: usize,
    pub lr: f64,
    pub loss_total: f64,
    pub loss: Vec<f64>,
    pub top1: Vec<f64>,
    pub top5: Vec<f64>,
}

impl MetricsRecord {
    pub fn csv_header(tasks: &[String]) -> String {
        let mut h = String::from("step,lr,loss_total");
        for prefix in ["loss", "top1", "top5"] {
            for t in tasks {
                let _ = write!(h, ",{prefix}_{t}");
            }
        }
        h
    }

    pub fn csv_row(&self) -> String {
        let mut r = format!("{},{},{}", self.step, self.lr, self.loss_total);
        for v in self.loss.iter().chain(&self.top1).chain(&self.top5) {
            let _ = write!(r, ",{v}");
        }
        r
    }
}

pub const METRICS_VERSION: u32 = 1;

/// Metrics CSV text: a `#` line with format version and seed, the header, rows.
pub fn metrics_csv(tasks: &[String], seed: u64, records: &[MetricsRecord]) -> String {
    let mut out = format!("# xres metrics v{METRICS_VERSION} seed={seed}\n{}\n", MetricsRecord::csv_header(tasks));
    for r in records {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

/// Maps each head to its dataset label column by name.
pub fn task_columns<T: Element>(net: &Network<T>) -> Result<Vec<usize>> {
    net.spec()
        .heads
        .iter()
        .map(|h| {
            TASK_NAMES.iter().position(|&t| t == h.name).ok_or_else(|| {
                Error::spec("arch.heads", format!("head '{}' matches no dataset task {TASK_NAMES:?}", h.name))
            })
        })
        .collect()
}

fn check_heads<T: Element>(net: &Network<T>, ds: &Dataset) -> Result<Vec<usize>> {
    let columns = task_columns(net)?;
    let counts = ds.class_counts();
    for (h, &c) in net.spec().heads.iter().zip(&columns) {
        if h.classes != counts[c] {
            return Err(Error::spec(
                "arch.heads",
                format!("head '{}' has {} classes but the dataset has {}", h.name, h.classes, counts[c]),
            ));
        }
    }
    if net.spec().input_size != ds.image_size {
        return Err(Error::spec(
            "arch.input_size",
            format!("network takes {} px images, dataset has {}", net.spec().input_size, ds.image_size),
        ));
    }
    Ok(columns)
}

/// Mean per-task loss (summed over tasks in `loss_total`) and accuracies on
/// `indices`, with batch norm in evaluation mode.
pub fn evaluate<T: Element>(net: &mut Network<T>, ds: &Dataset, indices: &[usize], batch_size: usize) -> Result<(f64, Vec<f64>, Vec<f64>, Vec<f64>)> {
    let columns = check_heads(net, ds)?;
    let tasks = columns.len();
    if indices.is_empty() {
        return Err(Error::invalid("evaluate", "no samples to evaluate"));
    }
    let mut loss = vec![0.0; tasks];
    let mut hits1 = vec![0.0; tasks];
    let mut hits5 = vec![0.0; tasks];
    for chunk in indices.chunks(batch_size.max(1)) {
        let mut g = Graph::new();
        let fwd = net.forward(&mut g, ds.batch(chunk, None), false)?;
        for (t, &col) in columns.iter().enumerate() {
            let labels: Vec<usize> = chunk.iter().map(|&i| ds.labels[i].task(col)).collect();
            let ce = g.softmax_cross_entropy(fwd.logits[t], &labels)?;
            let w = chunk.len() as f64;
            loss[t] += g.value(ce).item().as_f64() * w;
            let scores = g.value(fwd.logits[t]);
            let k5 = 5.min(scores.shape()[1]);
            hits1[t] += topk_accuracy(scores, &labels, 1)? * w;
            hits5[t] += topk_accuracy(scores, &labels, k5)? * w;
        }
    }
    let n = indices.len() as f64;
    let loss: Vec<f64> = loss.into_iter().map(|v| v / n).collect();
    Ok((
        loss.iter().sum(),
        loss,
        hits1.into_iter().map(|v| v / n).collect(),
        hits5.into_iter().map(|v| v / n).collect(),
    ))
}

/// Where a training run writes its artifacts.
#[derive(Clone, Debug, Default)]
pub struct Outputs {
    pub dir: Option<PathBuf>,
    /// Print each metrics row to stderr.
    pub verbose: bool,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub records: Vec<MetricsRecord>,
    pub steps: usize,
    /// Step of the evaluation with the lowest loss.
    pub best_step: usize,
    pub stopped_early: bool,
}

/// Runs SGD on `train` samples, evaluating on `test` every `eval.interval`
/// steps (once per epoch when 0) and after the final step. Each epoch
/// visits the training set in a seeded shuffled order; the incomplete tail
/// batch is dropped so batch statistics always see `batch_size` samples.
pub fn train<T: Element>(
    net: &mut Network<T>,
    ds: &Dataset,
    train: &[usize],
    test: &[usize],
    cfg: &TrainConfig,
    eval: &EvalConfig,
    out: &Outputs,
) -> Result<TrainReport> {
    cfg.validate().map_err(|m| Error::spec("train", m))?;
    let columns = check_heads(net, ds)?;
    if train.len() < cfg.batch_size {
        return Err(Error::invalid("train", format!("{} training samples for batch size {}", train.len(), cfg.batch_size)));
    }
    if let Some(dir) = &out.dir {
        fs::create_dir_all(dir)?;
    }
    let tasks: Vec<String> = net.spec().heads.iter().map(|h| h.name.clone()).collect();
    let mut sgd = Sgd::<T>::new(net.params());
    let mut sched = PlateauSchedule::new(cfg);
    let mut records = Vec::new();
    let mut best: Option<(f64, usize)> = None;
    let batches_per_epoch = train.len() / cfg.batch_size;
    let interval = if eval.interval == 0 { batches_per_epoch } else { eval.interval };
    let total_steps = cfg.epochs * batches_per_epoch;
    let mut step = 0;
    let mut stopped_early = false;
    let mut order = train.to_vec();

    'epochs: for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64);
        order.copy_from_slice(train);
        order.shuffle(&mut rng);
        for batch in order.chunks_exact(cfg.batch_size) {
            let flips: Vec<bool> = batch.iter().map(|_| cfg.flip && rng.random_bool(0.5)).collect();
            let mut g = Graph::new();
            let fwd = net.forward(&mut g, ds.batch(batch, Some(&flips)), true)?;
            let labels: Vec<Vec<usize>> = columns
                .iter()
                .map(|&c| batch.iter().map(|&i| ds.labels[i].task(c)).collect())
                .collect();
            let loss = multitask_loss(&mut g, &fwd.logits, &labels)?;
            step += 1;
            if !g.value(loss).item().is_finite() {
                return Err(Error::NonFinite { step });
            }
            g.backward(loss)?;
            let grads: Vec<Option<&Tensor<T>>> = fwd.params.iter().map(|&v| g.grad(v)).collect();
            sgd.step(net.params_mut(), &grads, sched.lr, cfg.momentum, cfg.weight_decay);

            if step % interval == 0 || step == total_steps {
                let lr_used = sched.lr;
                let (total, loss, top1, top5) = evaluate(net, ds, test, eval.batch_size)?;
                if !total.is_finite() {
                    return Err(Error::NonFinite { step });
                }
                let rec = MetricsRecord {
                    step,
                    lr: lr_used,
                    loss_total: total,
                    loss,
                    top1,
                    top5,
                };
                if out.verbose {
                    eprintln!("{}", rec.csv_row());
                }
                records.push(rec);
                if let Some(dir) = &out.dir {
                    fs::write(dir.join("metrics.csv"), metrics_csv(&tasks, cfg.seed, &records))?;
                    if best.is_none_or(|(b, _)| total < b) {
                        checkpoint::save(net, cfg.seed, dir.join("best.ckpt"))?;
                    }
                }
                if best.is_none_or(|(b, _)| total < b) {
                    best = Some((total, step));
                }
                if sched.observe(total) == PlateauEvent::Stop {
                    stopped_early = step < total_steps;
                    break 'epochs;
                }
            }
        }
    }
    if records.last().is_none_or(|r| r.step != step) {
        let (total, loss, top1, top5) = evaluate(net, ds, test, eval.batch_size)?;
        records.push(MetricsRecord {
            step,
            lr: sched.lr,
            loss_total: total,
            loss,
            top1,
            top5,
        });
    }
    if let Some(dir) = &out.dir {
        fs::write(dir.join("metrics.csv"), metrics_csv(&tasks, cfg.seed, &records))?;
        checkpoint::save(net, cfg.seed, dir.join("last.ckpt"))?;
    }
    Ok(TrainReport {
        records,
        steps: step,
        best_step: best.map_or(step, |b| b.1),
        stopped_early,
    })
}

/// One row of the sorted cross-weight table.
#[derive(Clone, Debug, PartialEq)]
pub struct CrossWeightRow {
    pub layer: String,
    pub source: String,
    pub target: String,
    pub rank: usize,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CrossWeightDump {
    pub rows: Vec<CrossWeightRow>,
    pub warning: Option<String>,
}

impl CrossWeightDump {
    pub fn to_csv(&self, seed: u64) -> String {
        let mut out = format!("# xres cross-weights v{METRICS_VERSION} seed={seed}\nlayer,source,target,rank,value\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{},{}", r.layer, r.source, r.target, r.rank, r.value);
        }
        out
    }

    pub fn nonnegative_fraction(&self) -> f64 {
        if self.rows.is_empty() {
            return 0.0;
        }
        self.rows.iter().filter(|r| r.value >= 0.0).count() as f64 / self.rows.len() as f64
    }
}

/// Every channel-scale cross entry, its weights sorted ascending.
pub fn dump_cross_weights<T: Element>(net: &Network<T>) -> CrossWeightDump {
    let mut rows = Vec::new();
    for (layer, source, target, a) in net.cross_scales() {
        let mut values: Vec<f64> = a.data().iter().map(|v| v.as_f64()).collect();
        values.sort_by(f64::total_cmp);
        rows.extend(values.into_iter().enumerate().map(|(rank, value)| CrossWeightRow {
            layer: layer.clone(),
            source: source.clone(),
            target: target.clone(),
            rank,
            value,
        }));
    }
    let warning = (rows.is_empty()).then(|| match net.variant() {
        Variant::Xs => "network has no cross-residual layers".to_string(),
        v => format!("variant {v} has no learned cross weights"),
    });
    CrossWeightDump { rows, warning }
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text)?;
    Ok(())
}

/// Summed multitask loss of `net` on a fixed batch as a function of all
/// parameters, for finite-difference checking.
struct NetworkObjective {
    net: Network<f64>,
    images: Tensor<f64>,
    labels: Vec<Vec<usize>>,
    train: bool,
}

impl NetworkObjective {
    fn eval(&mut self, params: &[Tensor<f64>], want_grad: bool) -> Result<(f64, u64, Vec<Tensor<f64>>)> {
        for (i, p) in params.iter().enumerate() {
            self.net.params_mut().at_mut(i).value = p.clone();
        }
        let mut g = Graph::new();
        let fwd = self.net.forward(&mut g, self.images.clone(), self.train)?;
        let loss = multitask_loss(&mut g, &fwd.logits, &self.labels)?;
        let value = g.value(loss).item();
        if !want_grad {
            return Ok((value, g.kink_pattern(), Vec::new()));
        }
        g.backward(loss)?;
        let grads = fwd
            .params
            .iter()
            .zip(params)
            .map(|(&v, p)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(p.shape().to_vec())))
            .collect();
        Ok((value, 0, grads))
    }
}

impl Objective for NetworkObjective {
    fn loss(&mut self, params: &[Tensor<f64>]) -> Result<f64> {
        Ok(self.eval(params, false)?.0)
    }

    fn gradient(&mut self, params: &[Tensor<f64>]) -> Result<Vec<Tensor<f64>>> {
        Ok(self.eval(params, true)?.2)
    }

    fn loss_and_pattern(&mut self, params: &[Tensor<f64>]) -> Result<(f64, Option<u64>)> {
        let (value, pattern, _) = self.eval(params, false)?;
        Ok((value, Some(pattern)))
    }
}

/// Analytic gradient norm below which a tensor counts as structurally zero.
pub const ZERO_GRAD_NORM: f64 = 1e-12;
/// Central-difference roundoff allowed on a structurally zero gradient.
pub const FD_NOISE_NORM: f64 = 1e-8;

/// Finite-difference checks of a whole network in both batch-norm modes.
#[derive(Clone, Debug)]
pub struct NetworkCheck {
    pub names: Vec<String>,
    /// Batch norm on running statistics: every tensor has a live gradient.
    pub eval: GradCheckReport,
    /// Batch norm on batch statistics.
    pub train: GradCheckReport,
}

impl NetworkCheck {
    /// Train-mode tensors whose exact gradient vanishes, such as a norm
    /// shift feeding straight into another batch-statistics norm.
    pub fn structural_zeros(&self) -> Vec<&str> {
        self.train
            .tensors
            .iter()
            .filter(|t| t.analytic_norm <= ZERO_GRAD_NORM && t.numeric_norm <= FD_NOISE_NORM)
            .map(|t| self.names[t.index].as_str())
            .collect()
    }

    /// Largest relative error over every eval-mode tensor and every
    /// train-mode tensor that is not a structural zero.
    pub fn max_rel_error(&self) -> f64 {
        let live = self
            .train
            .tensors
            .iter()
            .filter(|t| !(t.analytic_norm <= ZERO_GRAD_NORM && t.numeric_norm <= FD_NOISE_NORM))
            .map(|t| t.rel_error);
        live.fold(self.eval.max_rel_error(), f64::max)
    }

    /// Name and error of the worst offending tensor.
    pub fn worst(&self) -> Option<(&str, f64)> {
        let zeros = self.structural_zeros();
        self.eval
            .tensors
            .iter()
            .chain(self.train.tensors.iter().filter(|t| !zeros.contains(&self.names[t.index].as_str())))
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
            .map(|t| (self.names[t.index].as_str(), t.rel_error))
    }

    pub fn entries_checked(&self) -> usize {
        self.eval.entries_checked() + self.train.entries_checked()
    }

    pub fn entries_refined(&self) -> usize {
        self.eval.entries_refined() + self.train.entries_refined()
    }

    pub fn entries_kinked(&self) -> usize {
        self.eval.entries_kinked() + self.train.entries_kinked()
    }
}

/// Central-difference check of every parameter gradient of the summed
/// multitask loss on one batch, with batch norm in each mode. Eval mode
/// uses running statistics updated by one training-mode pass on the batch.
pub fn gradcheck_network(
    net: &Network<f64>,
    images: &Tensor<f64>,
    labels: &[Vec<usize>],
    opts: &GradCheckOptions,
) -> Result<NetworkCheck> {
    let params: Vec<Tensor<f64>> = net.params().iter().map(|(_, p)| p.value.clone()).collect();
    // one batch-statistics pass moves the running statistics off their
    // initial values, so eval-mode units do not sit exactly on a ReLU kink
    let mut warmed = net.clone();
    warmed.forward(&mut Graph::new(), images.clone(), true)?;
    let run = |train: bool| {
        let mut obj = NetworkObjective {
            net: warmed.clone(),
            images: images.clone(),
            labels: labels.to_vec(),
            train,
        };
        finite_diff_check(&mut obj, &params, opts)
    };
    Ok(NetworkCheck {
        names: net.params().iter().map(|(n, _)| n.to_string()).collect(),
        eval: run(false)?,
        train: run(true)?,
    })
}
