//! Damage and evolution studies on trained networks: node ablation, edge
//! pruning, α distributions and snapshot retraining.
//!
//! Sweeps never touch the network they are given; every trial runs on a
//! copy, and independent trials run in parallel.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;
use crate::data::Dataset;
use crate::graph::{to_text, AlphaMatrix, Graph, GraphError};
use crate::network::{build_with_graphs, Network, NetworkError};
use crate::trainer::{fmt_g6, train, Snapshot, TrainConfig, TrainError};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("retraining requested without a retrain config")]
    MissingRetrainConfig,
    #[error("thresholds must be ascending")]
    ThresholdsNotAscending,
    #[error("need at least {min} snapshots, got {got}")]
    TooFewSnapshots { min: usize, got: usize },
    #[error("snapshot/architecture mismatch: {0}")]
    SnapshotMismatch(String),
    #[error("need at least 2 bins, got {0}")]
    TooFewBins(usize),
    #[error("prune fraction {0} outside [0, 1]")]
    InvalidFraction(f64),
    #[error("stage {stage}: {source}")]
    Stage { stage: usize, source: GraphError },
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, AnalysisError>;

/// Batch size used for evaluation passes.
const EVAL_CHUNK: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    /// Internal nodes, stage-major in topological order.
    Node,
    Threshold,
    SnapshotEpoch,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepPoint {
    pub axis: f64,
    /// Stage and node for node-ablation points.
    pub stage: Option<usize>,
    pub node: Option<usize>,
    pub accuracy: f64,
    /// Fraction of edges removed relative to the unpruned network.
    pub pruned_fraction: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepMeta {
    pub seed: u64,
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepResult {
    pub axis: SweepAxis,
    /// Accuracy of the untouched model (or of the first snapshot).
    pub baseline: f64,
    pub points: Vec<SweepPoint>,
    pub meta: SweepMeta,
}

impl SweepResult {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("axis,stage,node,accuracy,pruned_fraction\n");
        let opt = |v: Option<usize>| v.map_or(String::new(), |v| v.to_string());
        for p in &self.points {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                fmt_g6(p.axis),
                opt(p.stage),
                opt(p.node),
                fmt_g6(p.accuracy),
                fmt_g6(p.pruned_fraction)
            ));
        }
        out
    }

    /// Writes `<stem>.csv` and a `<stem>.json` metadata sidecar.
    pub fn export(&self, dir: &Path, stem: &str) -> Result<()> {
        fs::write(dir.join(format!("{stem}.csv")), self.to_csv())?;
        let sidecar = serde_json::json!({
            "axis": self.axis,
            "baseline": self.baseline,
            "points": self.points.len(),
            "seed": self.meta.seed,
            "config_hash": self.meta.config_hash,
        });
        fs::write(dir.join(format!("{stem}.json")), serde_json::to_string_pretty(&sidecar).expect("json") + "\n")?;
        Ok(())
    }
}

fn accuracy(net: &Network, data: &Dataset) -> Result<f64> {
    Ok(net.accuracy(&data.features, &data.labels, EVAL_CHUNK)?)
}

/// Accuracy with each internal node removed in turn, by zeroing the weights
/// of its outgoing edges. Nodes are visited stage by stage in topological
/// order.
pub fn node_ablation_sweep(net: &Network, eval: &Dataset, meta: SweepMeta) -> Result<SweepResult> {
    let baseline = accuracy(net, eval)?;
    let targets: Vec<(usize, usize)> = net
        .stages()
        .iter()
        .enumerate()
        .flat_map(|(k, s)| s.graph.internal_nodes().map(move |i| (k, i)))
        .collect();
    let points = targets
        .par_iter()
        .enumerate()
        .map(|(ordinal, &(k, i))| {
            let mut trial = net.clone();
            trial.mask_node(k, i)?;
            Ok(SweepPoint {
                axis: ordinal as f64,
                stage: Some(k),
                node: Some(i),
                accuracy: accuracy(&trial, eval)?,
                pruned_fraction: 0.0,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepResult { axis: SweepAxis::Node, baseline, points, meta })
}

/// Training data and schedule for retraining node weights after pruning.
#[derive(Debug, Clone)]
pub struct Retrain<'a> {
    pub train_set: &'a Dataset,
    pub val_set: &'a Dataset,
    pub config: TrainConfig,
}

/// Drops every edge with `|alpha| < threshold` in every stage.
pub fn prune_all(net: &Network, threshold: f64) -> Result<(Vec<Graph>, Vec<AlphaMatrix>)> {
    let mut graphs = Vec::new();
    let mut alphas = Vec::new();
    for (k, st) in net.stages().iter().enumerate() {
        let a = net.alpha_matrix(k)?;
        let (g, pa) = st.graph.prune_edges(&a, threshold).map_err(|source| AnalysisError::Stage { stage: k, source })?;
        graphs.push(g);
        alphas.push(pa);
    }
    Ok((graphs, alphas))
}

/// Same node weights and statistics over new topologies.
pub fn with_topologies(net: &Network, graphs: Vec<Graph>, alphas: &[AlphaMatrix]) -> Result<Network> {
    let mut state = net.to_state();
    if graphs.len() != state.stages.len() {
        return Err(AnalysisError::SnapshotMismatch(format!("{} graphs for {} stages", graphs.len(), state.stages.len())));
    }
    for ((st, g), a) in state.stages.iter_mut().zip(graphs).zip(alphas) {
        let n = g.n_nodes();
        st.graph = g;
        st.alpha = Tensor::from_vec(n, n, a.values().to_vec()).map_err(NetworkError::from)?;
    }
    Ok(Network::from_state(state)?)
}

/// Fresh node weights from the network seed over `graphs`, with `alphas`
/// installed and frozen, trained with `cfg`. Returns the network and its
/// final validation accuracy.
pub fn retrain_frozen(
    net_like: &Network,
    graphs: Vec<Graph>,
    alphas: &[AlphaMatrix],
    data: &Retrain<'_>,
) -> Result<(Network, f64)> {
    let mut fresh = build_with_graphs(graphs, net_like.spec(), net_like.seed())?;
    for (k, a) in alphas.iter().enumerate() {
        fresh.set_alpha(k, a)?;
    }
    let cfg = TrainConfig { train_alpha: false, ..data.config.clone() };
    let outcome = train(&mut fresh, data.train_set, data.val_set, &cfg)?;
    let acc = match outcome.metrics.last() {
        Some(r) => r.val_acc,
        None => accuracy(&fresh, data.val_set)?,
    };
    Ok((fresh, acc))
}

/// Prunes at each threshold and evaluates on `eval`, optionally after
/// retraining the node weights from the original seed with α frozen.
pub fn edge_pruning_sweep(
    net: &Network,
    eval: &Dataset,
    thresholds: &[f64],
    retrain: bool,
    retrain_config: Option<&Retrain<'_>>,
    meta: SweepMeta,
) -> Result<SweepResult> {
    if thresholds.windows(2).any(|w| !(w[0] <= w[1])) {
        return Err(AnalysisError::ThresholdsNotAscending);
    }
    let rc = match (retrain, retrain_config) {
        (true, None) => return Err(AnalysisError::MissingRetrainConfig),
        (true, Some(rc)) => Some(rc),
        (false, _) => None,
    };
    let baseline = accuracy(net, eval)?;
    let total = net.edge_count();
    let points = thresholds
        .par_iter()
        .map(|&t| {
            let (graphs, alphas) = prune_all(net, t)?;
            let kept: usize = graphs.iter().map(|g| g.edge_count()).sum();
            let acc = match rc {
                Some(rc) => {
                    let (fresh, _) = retrain_frozen(net, graphs, &alphas, rc)?;
                    accuracy(&fresh, eval)?
                }
                None => accuracy(&with_topologies(net, graphs, &alphas)?, eval)?,
            };
            let pruned_fraction = if total == 0 { 0.0 } else { 1.0 - kept as f64 / total as f64 };
            Ok(SweepPoint { axis: t, stage: None, node: None, accuracy: acc, pruned_fraction })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepResult { axis: SweepAxis::Threshold, baseline, points, meta })
}

/// Threshold that prunes the `fraction` of edges with the smallest `|alpha|`
/// (fewer when magnitudes tie at the cut).
pub fn threshold_for_fraction(net: &Network, fraction: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(AnalysisError::InvalidFraction(fraction));
    }
    let mut mags: Vec<f64> = net.edge_alphas().iter().map(|a| a.abs()).collect();
    mags.sort_by(f64::total_cmp);
    let k = (fraction * mags.len() as f64).round() as usize;
    Ok(match k {
        0 => 0.0,
        k if k >= mags.len() => mags.last().map_or(0.0, |m| m * 2.0 + 1.0),
        k => mags[k],
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlphaHistogram {
    /// `counts.len() + 1` ascending bin boundaries.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    /// Per-stage weights, for heat maps.
    pub matrices: Vec<AlphaMatrix>,
    pub graphs: Vec<Graph>,
}

impl AlphaHistogram {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_lo,bin_hi,count\n");
        for (i, c) in self.counts.iter().enumerate() {
            out.push_str(&format!("{},{},{}\n", fmt_g6(self.edges[i]), fmt_g6(self.edges[i + 1]), c));
        }
        out
    }

    /// Writes the histogram CSV and one adjacency text file per stage.
    pub fn export(&self, dir: &Path, stem: &str) -> Result<()> {
        fs::write(dir.join(format!("{stem}.csv")), self.to_csv())?;
        for (k, (g, a)) in self.graphs.iter().zip(&self.matrices).enumerate() {
            fs::write(dir.join(format!("{stem}_stage{k}.txt")), to_text(g, Some(a)))?;
        }
        Ok(())
    }
}

/// Histogram of every existing-edge α over `[min, max]` split into
/// `num_bins` equal bins; the last bin is closed. When all weights are
/// equal the range becomes `[v - 0.5, v + 0.5]`.
pub fn alpha_histogram(net: &Network, num_bins: usize) -> Result<AlphaHistogram> {
    if num_bins < 2 {
        return Err(AnalysisError::TooFewBins(num_bins));
    }
    let values = net.edge_alphas();
    let (mut lo, mut hi) = values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    if values.is_empty() {
        (lo, hi) = (0.0, 1.0);
    } else if lo == hi {
        (lo, hi) = (lo - 0.5, hi + 0.5);
    }
    let width = (hi - lo) / num_bins as f64;
    let mut edges: Vec<f64> = (0..=num_bins).map(|i| lo + width * i as f64).collect();
    edges[num_bins] = hi;
    let mut counts = vec![0; num_bins];
    for v in values {
        let b = (((v - lo) / (hi - lo)) * num_bins as f64).floor() as usize;
        counts[b.min(num_bins - 1)] += 1;
    }
    Ok(AlphaHistogram { edges, counts, matrices: net.alpha_matrices(), graphs: net.graphs() })
}

/// Retrains fresh node weights under each snapshot's frozen α and reports
/// the final validation accuracy per snapshot epoch.
pub fn snapshot_retrain_study(
    snapshots: &[Snapshot],
    train_set: &Dataset,
    val_set: &Dataset,
    retrain_config: &TrainConfig,
    meta: SweepMeta,
) -> Result<SweepResult> {
    if snapshots.len() < 2 {
        return Err(AnalysisError::TooFewSnapshots { min: 2, got: snapshots.len() });
    }
    let reference = &snapshots[0];
    let shape = |s: &Snapshot| s.graphs.iter().map(|g| g.n_nodes()).collect::<Vec<_>>();
    for s in snapshots {
        if shape(s) != shape(reference) || s.alphas.len() != s.graphs.len() || s.state.spec != reference.state.spec {
            return Err(AnalysisError::SnapshotMismatch(format!("snapshot at epoch {} differs in shape", s.epoch)));
        }
    }
    if snapshots.windows(2).any(|w| w[0].epoch >= w[1].epoch) {
        return Err(AnalysisError::SnapshotMismatch("snapshot epochs must increase".into()));
    }
    let template = Network::from_state(reference.state.clone())?;
    let rc = Retrain { train_set, val_set, config: retrain_config.clone() };
    let points = snapshots
        .par_iter()
        .map(|s| {
            let (_, acc) = retrain_frozen(&template, s.graphs.clone(), &s.alphas, &rc)?;
            Ok(SweepPoint { axis: s.epoch as f64, stage: None, node: None, accuracy: acc, pruned_fraction: 0.0 })
        })
        .collect::<Result<Vec<_>>>()?;
    let baseline = points[0].accuracy;
    Ok(SweepResult { axis: SweepAxis::SnapshotEpoch, baseline, points, meta })
}
