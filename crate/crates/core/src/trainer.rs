//! Joint optimization of node weights and edge weights.
//!
//! Every mini-batch runs one forward pass, one backward pass and a single
//! SGD step that moves all trainable parameters together. The L1 penalty on
//! edge weights does not go through the tape: its subgradient is added to
//! the α gradients just before the momentum update.

use std::io::Write;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Mode, ParamId, ParamStore, Role, Scalar, Tape, Tensor};
use crate::data::Dataset;
use crate::graph::{AlphaMatrix, Graph};
use crate::network::{argmax, Network, NetworkError, NetworkState};
use crate::rng::{self, Domain};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("epoch {epoch} out of range for {epochs} epochs")]
    EpochOutOfRange { epoch: usize, epochs: usize },
    #[error("edge into node {node} has in-degree {degree}")]
    InDegree { node: usize, degree: usize },
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("non-finite gradient in parameter {param} ({role:?})")]
    NonFiniteGradient { param: usize, role: Role },
    #[error("dataset mismatch: {0}")]
    Data(String),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("writing metrics: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Schedule {
    /// Multiply by `factor` at every milestone epoch reached.
    Step { milestones: Vec<usize>, factor: f64 },
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SparsityType {
    None,
    Uniform,
    Adaptive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub schedule: Schedule,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_true")]
    pub nesterov: bool,
    /// Applied to every parameter except edge weights.
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_sparsity")]
    pub sparsity: SparsityType,
    #[serde(default)]
    pub label_smoothing: f64,
    /// Seeds the mini-batch shuffle. Set from the experiment seed rather
    /// than read from the `train` section.
    #[serde(skip)]
    pub seed: u64,
    /// Snapshot `e` captures the state after `e` completed epochs.
    #[serde(default)]
    pub snapshot_epochs: Vec<usize>,
    /// When false, edge weights stay fixed and only node weights train.
    #[serde(default = "default_true")]
    pub train_alpha: bool,
}

fn default_momentum() -> f64 {
    0.9
}
fn default_true() -> bool {
    true
}
fn default_lambda() -> f64 {
    1e-4
}
fn default_sparsity() -> SparsityType {
    SparsityType::Adaptive
}

impl TrainConfig {
    pub fn new(epochs: usize, batch_size: usize, lr: f64) -> Self {
        TrainConfig {
            epochs,
            batch_size,
            lr,
            schedule: Schedule::Cosine,
            momentum: default_momentum(),
            nesterov: true,
            weight_decay: 0.0,
            lambda: default_lambda(),
            sparsity: default_sparsity(),
            label_smoothing: 0.0,
            seed: 0,
            snapshot_epochs: Vec::new(),
            train_alpha: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return bad(format!("lr {} must be finite and non-negative", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} outside [0, 1)", self.momentum));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return bad(format!("lambda {} must be finite and non-negative", self.lambda));
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("weight_decay {} must be non-negative", self.weight_decay));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return bad(format!("label_smoothing {} outside [0, 1)", self.label_smoothing));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if let Schedule::Step { milestones, factor } = &self.schedule {
            if !(*factor > 0.0 && *factor <= 1.0) {
                return bad(format!("step factor {factor} outside (0, 1]"));
            }
            if milestones.windows(2).any(|w| w[0] >= w[1]) {
                return bad("milestones must be strictly increasing".into());
            }
        }
        if let Some(&e) = self.snapshot_epochs.iter().find(|&&e| e > self.epochs) {
            return bad(format!("snapshot epoch {e} beyond {} epochs", self.epochs));
        }
        Ok(())
    }
}

/// Learning rate used throughout 0-based epoch `epoch`.
pub fn lr_at(cfg: &TrainConfig, epoch: usize) -> Result<f64> {
    if epoch >= cfg.epochs {
        return Err(TrainError::EpochOutOfRange { epoch, epochs: cfg.epochs });
    }
    Ok(match &cfg.schedule {
        Schedule::Step { milestones, factor } => {
            let passed = milestones.iter().filter(|&&m| m <= epoch).count();
            cfg.lr * factor.powi(passed as i32)
        }
        Schedule::Cosine => cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * epoch as f64 / cfg.epochs as f64).cos()),
    })
}

/// Task loss plus `lambda * sum |alpha|`; the penalty vanishes for
/// [`SparsityType::None`].
pub fn total_loss(task_loss: f64, alphas: &[f64], lambda: f64, kind: SparsityType) -> f64 {
    if kind == SparsityType::None || lambda == 0.0 {
        return task_loss;
    }
    task_loss + lambda * alphas.iter().map(|a| a.abs()).sum::<f64>()
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Gradient of the L1 term for one edge into a node of in-degree
/// `in_degree`: `lambda * sign(alpha)`, scaled by `ln(in_degree)` when
/// adaptive.
pub fn sparsity_subgradient(alpha: f64, lambda: f64, kind: SparsityType, in_degree: usize) -> Result<f64> {
    match kind {
        SparsityType::None => Ok(0.0),
        _ if in_degree == 0 => Err(TrainError::InDegree { node: 0, degree: 0 }),
        SparsityType::Uniform => Ok(lambda * sign(alpha)),
        SparsityType::Adaptive => Ok(lambda * (in_degree as f64).ln() * sign(alpha)),
    }
}

/// Adds the sparsity subgradient to every existing-edge α gradient.
pub fn add_sparsity<T: Scalar>(
    store: &mut ParamStore<T>,
    alpha: ParamId,
    graph: &Graph,
    lambda: f64,
    kind: SparsityType,
) -> Result<()> {
    if kind == SparsityType::None {
        return Ok(());
    }
    let n = graph.n_nodes();
    let deg = graph.in_degrees();
    let values: Vec<f64> = store.value(alpha).data().iter().map(|v| v.as_f64()).collect();
    let grad = &mut store.get_mut(alpha).grad;
    for e in graph.edges() {
        let k = e.to * n + e.from;
        let s = sparsity_subgradient(values[k], lambda, kind, deg[e.to])
            .map_err(|_| TrainError::InDegree { node: e.to, degree: deg[e.to] })?;
        grad.data_mut()[k] += T::of(s);
    }
    Ok(())
}

/// SGD with (optionally Nesterov) momentum and no dampening.
#[derive(Debug, Clone)]
pub struct Sgd<T: Scalar = f32> {
    pub momentum: f64,
    pub nesterov: bool,
    pub weight_decay: f64,
    velocity: Vec<Tensor<T>>,
    frozen: Vec<bool>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(store: &ParamStore<T>, momentum: f64, nesterov: bool, weight_decay: f64) -> Self {
        Sgd {
            momentum,
            nesterov,
            weight_decay,
            velocity: store.iter().map(|(_, p)| Tensor::zeros(p.value.rows(), p.value.cols())).collect(),
            frozen: vec![false; store.len()],
        }
    }

    /// Excludes `id` from every future update.
    pub fn freeze(&mut self, id: ParamId) {
        self.frozen[id.index()] = true;
    }

    /// `v <- mu v + g`, then `p <- p - lr (g + mu v)` (Nesterov) or
    /// `p <- p - lr v`. `g` includes weight decay for every role except
    /// edge weights. Nothing moves if any gradient is non-finite.
    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64) -> Result<()> {
        for (id, p) in store.iter() {
            if !self.frozen[id.index()] && !p.grad.all_finite() {
                return Err(TrainError::NonFiniteGradient { param: id.index(), role: p.role });
            }
        }
        let mu = T::of(self.momentum);
        let lr = T::of(lr);
        for (id, p) in store.iter_mut() {
            if self.frozen[id.index()] {
                continue;
            }
            let decay = if p.role == Role::EdgeWeight { T::zero() } else { T::of(self.weight_decay) };
            let v = &mut self.velocity[id.index()];
            for ((w, &g), vel) in p.value.data_mut().iter_mut().zip(p.grad.data()).zip(v.data_mut()) {
                let g = if decay == T::zero() { g } else { g + decay * *w };
                *vel = mu * *vel + g;
                let update = if self.nesterov { g + mu * *vel } else { *vel };
                *w -= lr * update;
            }
        }
        Ok(())
    }
}

/// One row of the metrics table. `epoch` is 1-based.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub task_loss: f64,
    pub l1_alpha: f64,
    pub train_acc: f64,
    pub val_acc: f64,
    pub frac_alpha_small: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Metrics {
    pub records: Vec<EpochRecord>,
}

pub const METRICS_HEADER: &str = "epoch,train_loss,task_loss,l1_alpha,train_acc,val_acc,frac_alpha_small,lr";

/// `%.6g`-style formatting: six significant digits, no trailing zeros.
pub fn fmt_g6(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return x.to_string();
    }
    // exponent after rounding to six significant digits decides the style
    let sci = format!("{x:.5e}");
    let (mant, e) = sci.split_once('e').expect("exponent");
    let exp: i32 = e.parse().expect("integer exponent");
    if (-4..6).contains(&exp) {
        let decimals = (5 - exp) as usize;
        trim_zeros(format!("{x:.decimals$}"))
    } else {
        format!("{}e{}{:02}", trim_zeros(mant.to_string()), if exp < 0 { '-' } else { '+' }, exp.abs())
    }
}

fn trim_zeros(s: String) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

impl Metrics {
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{METRICS_HEADER}")?;
        for r in &self.records {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{}",
                r.epoch,
                fmt_g6(r.train_loss),
                fmt_g6(r.task_loss),
                fmt_g6(r.l1_alpha),
                fmt_g6(r.train_acc),
                fmt_g6(r.val_acc),
                fmt_g6(r.frac_alpha_small),
                fmt_g6(r.lr)
            )?;
        }
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("in-memory write");
        String::from_utf8(buf).expect("ascii")
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }
}

/// Frozen copy of the topology after `epoch` completed epochs, plus the
/// full network state for checkpointing.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub epoch: usize,
    pub graphs: Vec<Graph>,
    pub alphas: Vec<AlphaMatrix>,
    pub state: NetworkState,
}

impl Snapshot {
    pub fn capture(net: &Network, epoch: usize) -> Self {
        Snapshot { epoch, graphs: net.graphs(), alphas: net.alpha_matrices(), state: net.to_state() }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub metrics: Metrics,
    pub snapshots: Vec<Snapshot>,
}

/// Totals from one optimization step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub task_loss: f64,
    pub correct: usize,
    pub rows: usize,
}

/// Optimizer state bound to one network.
pub struct Trainer<T: Scalar = f32> {
    cfg: TrainConfig,
    sgd: Sgd<T>,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(net: &Network<T>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut sgd = Sgd::new(net.params(), cfg.momentum, cfg.nesterov, cfg.weight_decay);
        if !cfg.train_alpha {
            for id in net.alpha_ids() {
                sgd.freeze(id);
            }
        }
        Ok(Trainer { cfg, sgd })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// Forward, backward, sparsity subgradient and one joint SGD step.
    pub fn step(&mut self, net: &mut Network<T>, x: &Tensor<T>, labels: &[usize], lr: f64) -> Result<StepStats> {
        let mut tape = Tape::new();
        let fw = net.forward_frozen(&mut tape, x, Mode::Train)?;
        let loss = tape.softmax_cross_entropy(fw.logits, labels, self.cfg.label_smoothing)?;
        let task_loss = tape.value(loss).item().as_f64();
        if !task_loss.is_finite() {
            return Err(TrainError::NonFiniteLoss { epoch: 0, batch: 0 });
        }
        let logits = tape.value(fw.logits);
        let correct = (0..logits.rows()).filter(|&r| argmax(logits.row(r)) == labels[r]).count();
        tape.backward(loss, net.params_mut())?;
        if self.cfg.train_alpha {
            for k in 0..net.stages().len() {
                let (id, graph) = (net.stages()[k].alpha, net.stages()[k].graph.clone());
                add_sparsity(net.params_mut(), id, &graph, self.cfg.lambda, self.cfg.sparsity)?;
            }
        }
        self.sgd.step(net.params_mut(), lr)?;
        net.apply_stat_updates(&fw.stat_updates);
        Ok(StepStats { task_loss, correct, rows: labels.len() })
    }
}

/// Fraction of existing-edge weights with `|alpha| < 0.1`.
pub fn frac_alpha_small<T: Scalar>(net: &Network<T>) -> f64 {
    let a = net.edge_alphas();
    if a.is_empty() {
        return 0.0;
    }
    a.iter().filter(|v| v.abs() < 0.1).count() as f64 / a.len() as f64
}

const EVAL_CHUNK: usize = 512;

/// Trains `net` in place for `cfg.epochs` epochs.
///
/// Each epoch visits the training rows in an order drawn from the
/// `(seed, Shuffle, epoch)` stream. With batch norm enabled a trailing batch
/// of one row is skipped, since batch statistics need two. Validation
/// accuracy is measured in eval mode after every epoch.
pub fn train(net: &mut Network, train_set: &Dataset, val_set: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(net, cfg.clone())?;
    let dim = net.spec().input_dim;
    for (name, d) in [("train", train_set), ("validation", val_set)] {
        if d.is_empty() {
            return Err(TrainError::Data(format!("{name} set is empty")));
        }
        if d.input_dim() != dim {
            return Err(TrainError::Data(format!("{name} set has {} features, network expects {dim}", d.input_dim())));
        }
        if d.num_classes > net.spec().num_classes {
            return Err(TrainError::Data(format!("{name} set has {} classes", d.num_classes)));
        }
    }
    let mut snapshots = Vec::new();
    if cfg.snapshot_epochs.contains(&0) {
        snapshots.push(Snapshot::capture(net, 0));
    }
    let min_batch = if net.spec().use_norm { 2 } else { 1 };
    let mut metrics = Metrics::default();
    for epoch in 0..cfg.epochs {
        let lr = lr_at(cfg, epoch)?;
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut rng::stream(cfg.seed, Domain::Shuffle, epoch as u64));
        let (mut loss_sum, mut correct, mut seen) = (0.0, 0usize, 0usize);
        for (batch, idx) in order.chunks(cfg.batch_size).enumerate() {
            if idx.len() < min_batch {
                continue;
            }
            let x = train_set.features.gather_rows(idx);
            let labels: Vec<usize> = idx.iter().map(|&i| train_set.labels[i]).collect();
            let stats = trainer.step(net, &x, &labels, lr).map_err(|e| match e {
                TrainError::NonFiniteLoss { .. } => TrainError::NonFiniteLoss { epoch: epoch + 1, batch },
                other => other,
            })?;
            loss_sum += stats.task_loss * stats.rows as f64;
            correct += stats.correct;
            seen += stats.rows;
        }
        let task_loss = if seen > 0 { loss_sum / seen as f64 } else { 0.0 };
        let alphas = net.edge_alphas();
        metrics.records.push(EpochRecord {
            epoch: epoch + 1,
            train_loss: total_loss(task_loss, &alphas, cfg.lambda, cfg.sparsity),
            task_loss,
            l1_alpha: net.l1_alpha(),
            train_acc: if seen > 0 { correct as f64 / seen as f64 } else { 0.0 },
            val_acc: net.accuracy(&val_set.features, &val_set.labels, EVAL_CHUNK)?,
            frac_alpha_small: frac_alpha_small(net),
            lr,
        });
        if cfg.snapshot_epochs.contains(&(epoch + 1)) {
            snapshots.push(Snapshot::capture(net, epoch + 1));
        }
    }
    Ok(TrainOutcome { metrics, snapshots })
}
