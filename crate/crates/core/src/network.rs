//! Multi-stage DAG networks.
//!
//! A [`Network`] is an input head, a chain of stages and a linear
//! classifier. Each stage is a [`Graph`] whose internal nodes are
//! ReLU→Linear→BatchNorm units; node `i` consumes the α-weighted sum of its
//! predecessors' outputs. The stage's output node only aggregates, and that
//! aggregate feeds the next stage directly.
//!
//! Stage `k` (0-based) is `C·2^k` wide. The first internal node of a stage
//! owns the width change: it reads the raw stage input. Every other consumer
//! of node 0 sees the stage input zero-padded to the stage width, which is a
//! parameter-free shortcut.
//!
//! All trainable values live in one [`ParamStore`]. [`NetworkState`] is the
//! owned, plain-tensor form used for construction, surgery and persistence.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::autodiff::{
    AutodiffError, Coeff, Mode, ParamId, ParamStore, Role, RunningStats, Scalar, Tape, Tensor, Var,
};
use crate::graph::{residual_graph, AlphaMatrix, Graph, GraphError, TopologySpec};
use crate::rng::{self, Domain};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetworkError {
    #[error("input has {got} features, network expects {expected}")]
    InputWidth { expected: usize, got: usize },
    #[error("invalid network: {0}")]
    Invalid(String),
    #[error("stage {stage}: {source}")]
    Stage { stage: usize, source: GraphError },
    #[error("stage index {0} out of range")]
    StageIndex(usize),
    #[error("stage {0} is not a residual topology")]
    NotResidual(usize),
    #[error("stage {0} has an edge weight other than 1")]
    AlphaNotOne(usize),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

pub type Result<T> = std::result::Result<T, NetworkError>;

/// Shape of a network, independent of its topologies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input_dim: usize,
    pub num_classes: usize,
    /// Width of the first stage; later stages double it.
    pub base_width: usize,
    /// Whether node units end in batch normalization.
    pub use_norm: bool,
}

impl NetworkSpec {
    /// Width of stage `k`.
    pub fn stage_width(&self, k: usize) -> usize {
        self.base_width << k
    }

    fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.num_classes < 2 || self.base_width == 0 {
            return Err(NetworkError::Invalid(format!(
                "input_dim {}, num_classes {}, base_width {}",
                self.input_dim, self.num_classes, self.base_width
            )));
        }
        Ok(())
    }
}

/// Node count and topology of one stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageDef {
    pub nodes: usize,
    pub topology: TopologySpec,
}

/// Affine batch-norm parameters plus running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct NormState<T: Scalar = f32> {
    pub scale: Tensor<T>,
    pub shift: Tensor<T>,
    pub stats: RunningStats<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeState<T: Scalar = f32> {
    /// `(in_width, out_width)`.
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub norm: Option<NormState<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageState<T: Scalar = f32> {
    pub graph: Graph,
    /// `n x n`, row = destination node; zero off the edge set.
    pub alpha: Tensor<T>,
    pub width_in: usize,
    pub width_out: usize,
    /// One entry per internal node, in node order.
    pub nodes: Vec<NodeState<T>>,
}

/// Every value that defines a network, as owned tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkState<T: Scalar = f32> {
    pub spec: NetworkSpec,
    pub seed: u64,
    pub head_weight: Tensor<T>,
    pub head_bias: Tensor<T>,
    pub stages: Vec<StageState<T>>,
    pub classifier_weight: Tensor<T>,
    pub classifier_bias: Tensor<T>,
}

impl<T: Scalar> NetworkState<T> {
    pub fn cast<U: Scalar>(&self) -> NetworkState<U> {
        NetworkState {
            spec: self.spec,
            seed: self.seed,
            head_weight: self.head_weight.cast(),
            head_bias: self.head_bias.cast(),
            stages: self
                .stages
                .iter()
                .map(|s| StageState {
                    graph: s.graph.clone(),
                    alpha: s.alpha.cast(),
                    width_in: s.width_in,
                    width_out: s.width_out,
                    nodes: s
                        .nodes
                        .iter()
                        .map(|n| NodeState {
                            weight: n.weight.cast(),
                            bias: n.bias.cast(),
                            norm: n.norm.as_ref().map(|m| NormState {
                                scale: m.scale.cast(),
                                shift: m.shift.cast(),
                                stats: m.stats.cast(),
                            }),
                        })
                        .collect(),
                })
                .collect(),
            classifier_weight: self.classifier_weight.cast(),
            classifier_bias: self.classifier_bias.cast(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct NormUnit<T: Scalar = f32> {
    pub scale: ParamId,
    pub shift: ParamId,
    pub stats: RunningStats<T>,
}

/// Parameters of one internal node.
#[derive(Debug, Clone)]
pub struct NodeUnit<T: Scalar = f32> {
    pub in_width: usize,
    pub weight: ParamId,
    pub bias: ParamId,
    pub norm: Option<NormUnit<T>>,
}

#[derive(Debug, Clone)]
pub struct Stage<T: Scalar = f32> {
    pub graph: Graph,
    pub alpha: ParamId,
    pub width_in: usize,
    pub width_out: usize,
    /// `nodes[i - 1]` belongs to graph node `i`.
    pub nodes: Vec<NodeUnit<T>>,
}

/// Running statistics produced by a train-mode pass, not yet installed.
#[derive(Debug, Clone, PartialEq)]
pub struct StatUpdate<T: Scalar = f32> {
    pub stage: usize,
    pub node: usize,
    pub stats: RunningStats<T>,
}

/// Result of one forward pass.
#[derive(Debug, Clone)]
pub struct Forward<T: Scalar = f32> {
    pub logits: Var,
    /// Input to the classifier.
    pub features: Var,
    /// `aggregates[k][i]` is node `i`'s weighted input sum in stage `k`;
    /// `None` for the input node.
    pub aggregates: Vec<Vec<Option<Var>>>,
    pub stage_outputs: Vec<Var>,
    pub stat_updates: Vec<StatUpdate<T>>,
}

#[derive(Debug, Clone)]
pub struct Network<T: Scalar = f32> {
    spec: NetworkSpec,
    seed: u64,
    head_weight: ParamId,
    head_bias: ParamId,
    stages: Vec<Stage<T>>,
    classifier_weight: ParamId,
    classifier_bias: ParamId,
    params: ParamStore<T>,
}

/// Builds a network with one generated topology per stage.
///
/// Stage `k`'s graph is drawn from the topology stream `(seed, k)`; weights
/// come from [`build_with_graphs`] and so depend only on the seed and node
/// counts.
pub fn build_network(defs: &[StageDef], spec: NetworkSpec, seed: u64) -> Result<Network> {
    let graphs = defs
        .iter()
        .enumerate()
        .map(|(k, d)| {
            d.topology
                .generate(d.nodes, rng::derive_seed(seed, Domain::Topology, k as u64))
                .map_err(|source| NetworkError::Stage { stage: k, source })
        })
        .collect::<Result<Vec<_>>>()?;
    build_with_graphs(graphs, spec, seed)
}

/// Builds a network over the given graphs with α = 1 on every edge.
///
/// Linear weights are drawn from `N(0, 2/fan_in)`, biases and norm shifts
/// are 0, norm scales are 1. Every node draws from its own stream keyed by
/// `(stage, node)`, so two networks with the same seed and node counts share
/// weights whatever their edges.
pub fn build_with_graphs(graphs: Vec<Graph>, spec: NetworkSpec, seed: u64) -> Result<Network> {
    spec.validate()?;
    if graphs.is_empty() {
        return Err(NetworkError::Invalid("no stages".into()));
    }
    let head_width = spec.stage_width(0);
    let stage_count = graphs.len();
    let mut stages = Vec::with_capacity(stage_count);
    for (k, graph) in graphs.into_iter().enumerate() {
        let width_out = spec.stage_width(k);
        let width_in = if k == 0 { head_width } else { spec.stage_width(k - 1) };
        let n = graph.n_nodes();
        let mut alpha = Tensor::zeros(n, n);
        for e in graph.edges() {
            alpha.set(e.to, e.from, 1.0);
        }
        let stage_seed = rng::derive_seed(seed, Domain::Init, k as u64 + 1);
        let nodes = graph
            .internal_nodes()
            .map(|i| {
                let in_width = if i == 1 { width_in } else { width_out };
                let (weight, bias) = init_linear(in_width, width_out, rng::derive_seed(stage_seed, Domain::Init, i as u64));
                let norm = spec.use_norm.then(|| NormState {
                    scale: Tensor::full(1, width_out, 1.0),
                    shift: Tensor::zeros(1, width_out),
                    stats: RunningStats::new(width_out),
                });
                NodeState { weight, bias, norm }
            })
            .collect();
        stages.push(StageState { graph, alpha, width_in, width_out, nodes });
    }
    let (head_weight, head_bias) = init_linear(spec.input_dim, head_width, rng::derive_seed(seed, Domain::Init, 0));
    let (classifier_weight, classifier_bias) = init_linear(
        spec.stage_width(stage_count - 1),
        spec.num_classes,
        rng::derive_seed(seed, Domain::Init, u64::MAX),
    );
    Network::from_state(NetworkState {
        spec,
        seed,
        head_weight,
        head_bias,
        stages,
        classifier_weight,
        classifier_bias,
    })
}

fn init_linear(fan_in: usize, fan_out: usize, seed: u64) -> (Tensor<f32>, Tensor<f32>) {
    let mut rng = rng::seeded(seed);
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
    let data = (0..fan_in * fan_out).map(|_| normal.sample(&mut rng) as f32).collect();
    (Tensor::from_vec(fan_in, fan_out, data).expect("sized"), Tensor::zeros(1, fan_out))
}

fn expect_shape<T: Scalar>(t: &Tensor<T>, shape: (usize, usize), what: impl FnOnce() -> String) -> Result<()> {
    if t.shape() != shape {
        return Err(NetworkError::Invalid(format!("{} has shape {:?}, expected {:?}", what(), t.shape(), shape)));
    }
    Ok(())
}

impl<T: Scalar> Network<T> {
    /// Assembles a network, checking every width and shape.
    pub fn from_state(state: NetworkState<T>) -> Result<Self> {
        let spec = state.spec;
        spec.validate()?;
        if state.stages.is_empty() {
            return Err(NetworkError::Invalid("no stages".into()));
        }
        let mut params = ParamStore::new();
        expect_shape(&state.head_weight, (spec.input_dim, spec.base_width), || "head weight".into())?;
        expect_shape(&state.head_bias, (1, spec.base_width), || "head bias".into())?;
        let head_weight = params.add(state.head_weight, Role::Head);
        let head_bias = params.add(state.head_bias, Role::Head);

        let mut stages = Vec::with_capacity(state.stages.len());
        for (k, st) in state.stages.into_iter().enumerate() {
            let expected_in = if k == 0 { spec.base_width } else { spec.stage_width(k - 1) };
            if st.width_in != expected_in || st.width_out != spec.stage_width(k) {
                return Err(NetworkError::Invalid(format!(
                    "stage {k} widths {}->{}, expected {expected_in}->{}",
                    st.width_in,
                    st.width_out,
                    spec.stage_width(k)
                )));
            }
            let n = st.graph.n_nodes();
            expect_shape(&st.alpha, (n, n), || format!("stage {k} alpha"))?;
            let support: Vec<f32> = st.alpha.data().iter().map(|v| v.as_f64() as f32).collect();
            AlphaMatrix::from_values(&st.graph, support).map_err(|source| NetworkError::Stage { stage: k, source })?;
            if st.nodes.len() != n - 2 {
                return Err(NetworkError::Invalid(format!(
                    "stage {k} has {} node units for {} internal nodes",
                    st.nodes.len(),
                    n - 2
                )));
            }
            let rev = st.graph.reverse_adjacency();
            let alpha = params.add(st.alpha, Role::EdgeWeight);
            let mut nodes = Vec::with_capacity(n - 2);
            for (idx, node) in st.nodes.into_iter().enumerate() {
                let i = idx + 1;
                let in_width = node.weight.rows();
                let narrow = in_width == st.width_in && st.width_in != st.width_out;
                if !(narrow || in_width == st.width_out) || (narrow && rev[i].iter().any(|&j| j != 0)) {
                    return Err(NetworkError::Invalid(format!(
                        "stage {k} node {i}: input width {in_width} incompatible with its predecessors"
                    )));
                }
                expect_shape(&node.weight, (in_width, st.width_out), || format!("stage {k} node {i} weight"))?;
                expect_shape(&node.bias, (1, st.width_out), || format!("stage {k} node {i} bias"))?;
                if node.norm.is_some() != spec.use_norm {
                    return Err(NetworkError::Invalid(format!("stage {k} node {i}: normalization flag mismatch")));
                }
                let weight = params.add(node.weight, Role::NodeWeight);
                let bias = params.add(node.bias, Role::NodeWeight);
                let norm = match node.norm {
                    Some(m) => {
                        expect_shape(&m.scale, (1, st.width_out), || format!("stage {k} node {i} norm scale"))?;
                        expect_shape(&m.shift, (1, st.width_out), || format!("stage {k} node {i} norm shift"))?;
                        if m.stats.mean.len() != st.width_out || m.stats.var.len() != st.width_out {
                            return Err(NetworkError::Invalid(format!("stage {k} node {i}: running stats width")));
                        }
                        Some(NormUnit {
                            scale: params.add(m.scale, Role::NormScale),
                            shift: params.add(m.shift, Role::NormShift),
                            stats: m.stats,
                        })
                    }
                    None => None,
                };
                nodes.push(NodeUnit { in_width, weight, bias, norm });
            }
            stages.push(Stage { graph: st.graph, alpha, width_in: st.width_in, width_out: st.width_out, nodes });
        }
        let last = spec.stage_width(stages.len() - 1);
        expect_shape(&state.classifier_weight, (last, spec.num_classes), || "classifier weight".into())?;
        expect_shape(&state.classifier_bias, (1, spec.num_classes), || "classifier bias".into())?;
        let classifier_weight = params.add(state.classifier_weight, Role::Classifier);
        let classifier_bias = params.add(state.classifier_bias, Role::Classifier);
        Ok(Network { spec, seed: state.seed, head_weight, head_bias, stages, classifier_weight, classifier_bias, params })
    }

    pub fn to_state(&self) -> NetworkState<T> {
        let p = &self.params;
        NetworkState {
            spec: self.spec,
            seed: self.seed,
            head_weight: p.value(self.head_weight).clone(),
            head_bias: p.value(self.head_bias).clone(),
            stages: self
                .stages
                .iter()
                .map(|s| StageState {
                    graph: s.graph.clone(),
                    alpha: p.value(s.alpha).clone(),
                    width_in: s.width_in,
                    width_out: s.width_out,
                    nodes: s
                        .nodes
                        .iter()
                        .map(|u| NodeState {
                            weight: p.value(u.weight).clone(),
                            bias: p.value(u.bias).clone(),
                            norm: u.norm.as_ref().map(|m| NormState {
                                scale: p.value(m.scale).clone(),
                                shift: p.value(m.shift).clone(),
                                stats: m.stats.clone(),
                            }),
                        })
                        .collect(),
                })
                .collect(),
            classifier_weight: p.value(self.classifier_weight).clone(),
            classifier_bias: p.value(self.classifier_bias).clone(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Network<U> {
        Network::from_state(self.to_state().cast()).expect("cast preserves validity")
    }

    pub fn spec(&self) -> NetworkSpec {
        self.spec
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stages(&self) -> &[Stage<T>] {
        &self.stages
    }

    pub fn stage(&self, k: usize) -> Result<&Stage<T>> {
        self.stages.get(k).ok_or(NetworkError::StageIndex(k))
    }

    pub fn graphs(&self) -> Vec<Graph> {
        self.stages.iter().map(|s| s.graph.clone()).collect()
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn head(&self) -> (ParamId, ParamId) {
        (self.head_weight, self.head_bias)
    }

    pub fn classifier(&self) -> (ParamId, ParamId) {
        (self.classifier_weight, self.classifier_bias)
    }

    pub fn alpha_ids(&self) -> Vec<ParamId> {
        self.stages.iter().map(|s| s.alpha).collect()
    }

    /// Edge weights of stage `k`, rounded to `f32`.
    pub fn alpha_matrix(&self, k: usize) -> Result<AlphaMatrix> {
        let st = self.stage(k)?;
        let values = self.params.value(st.alpha).data().iter().map(|v| v.as_f64() as f32).collect();
        AlphaMatrix::from_values(&st.graph, values).map_err(|source| NetworkError::Stage { stage: k, source })
    }

    pub fn alpha_matrices(&self) -> Vec<AlphaMatrix> {
        (0..self.stages.len()).map(|k| self.alpha_matrix(k).expect("in range")).collect()
    }

    pub fn set_alpha(&mut self, k: usize, alpha: &AlphaMatrix) -> Result<()> {
        let st = self.stage(k)?;
        alpha.check_conforms(&st.graph).map_err(|source| NetworkError::Stage { stage: k, source })?;
        let id = st.alpha;
        for (dst, &v) in self.params.value_mut(id).data_mut().iter_mut().zip(alpha.values()) {
            *dst = T::of(v as f64);
        }
        Ok(())
    }

    /// `sum |alpha|` over every stage.
    pub fn l1_alpha(&self) -> f64 {
        self.stages
            .iter()
            .map(|s| self.params.value(s.alpha).data().iter().map(|v| v.as_f64().abs()).sum::<f64>())
            .sum()
    }

    pub fn edge_count(&self) -> usize {
        self.stages.iter().map(|s| s.graph.edge_count()).sum()
    }

    /// Every existing-edge weight, stage by stage in edge order.
    pub fn edge_alphas(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.edge_count());
        for s in &self.stages {
            let n = s.graph.n_nodes();
            let a = self.params.value(s.alpha).data();
            out.extend(s.graph.edges().map(|e| a[e.to * n + e.from].as_f64()));
        }
        out
    }

    /// Sets the weight of every edge leaving node `node` of stage `k` to 0,
    /// removing the node's contribution downstream.
    pub fn mask_node(&mut self, k: usize, node: usize) -> Result<()> {
        let st = self.stage(k)?;
        let n = st.graph.n_nodes();
        if node == 0 || node + 1 >= n {
            return Err(NetworkError::Stage { stage: k, source: GraphError::NotInternal { idx: node, n } });
        }
        let (id, succ) = (st.alpha, st.graph.successors(node));
        let a = self.params.value_mut(id);
        for to in succ {
            a.data_mut()[to * n + node] = T::zero();
        }
        Ok(())
    }

    /// Removes dead nodes from every stage. Returns the pruned network and,
    /// per stage, the surviving original node indices.
    ///
    /// Removing a node without successors never changes the output. Removing
    /// a node without predecessors drops its constant `o_i(0)` contribution
    /// and so may change it.
    pub fn eliminate_dead_nodes(&self) -> Result<(Network<T>, Vec<Vec<usize>>)> {
        let mut state = self.to_state();
        let mut kept = Vec::with_capacity(state.stages.len());
        for st in &mut state.stages {
            let keep = st.graph.live_nodes();
            let idx: Vec<usize> = (0..keep.len()).filter(|&i| keep[i]).collect();
            let n = st.graph.n_nodes();
            let m = idx.len();
            let mut alpha = Tensor::zeros(m, m);
            for (r, &to) in idx.iter().enumerate() {
                for (c, &from) in idx.iter().enumerate() {
                    alpha.set(r, c, st.alpha.get(to, from));
                }
            }
            let old_nodes = std::mem::take(&mut st.nodes);
            st.nodes = old_nodes
                .into_iter()
                .enumerate()
                .filter(|(i, _)| keep[i + 1])
                .map(|(_, u)| u)
                .collect();
            st.graph = st.graph.induced(&keep);
            st.alpha = alpha;
            debug_assert_eq!(st.nodes.len() + 2, m.max(2));
            debug_assert!(n >= m);
            kept.push(idx);
        }
        Ok((Network::from_state(state)?, kept))
    }

    /// SHA-256 over topology, parameters and running statistics.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        let put = |h: &mut Sha256, t: &[T]| {
            h.update((t.len() as u64).to_le_bytes());
            for v in t {
                h.update(v.as_f64().to_bits().to_le_bytes());
            }
        };
        for s in &self.stages {
            h.update((s.graph.n_nodes() as u64).to_le_bytes());
            for e in s.graph.edges() {
                h.update((e.from as u64).to_le_bytes());
                h.update((e.to as u64).to_le_bytes());
            }
            for u in &s.nodes {
                if let Some(m) = &u.norm {
                    put(&mut h, &m.stats.mean);
                    put(&mut h, &m.stats.var);
                }
            }
        }
        for (_, p) in self.params.iter() {
            put(&mut h, p.value.data());
        }
        hex::encode(h.finalize())
    }

    /// Train-mode passes install the new running statistics.
    pub fn forward(&mut self, tape: &mut Tape<T>, x: &Tensor<T>, mode: Mode) -> Result<Forward<T>> {
        let fw = self.forward_frozen(tape, x, mode)?;
        self.apply_stat_updates(&fw.stat_updates);
        Ok(fw)
    }

    /// Like [`Network::forward`] but leaves the network untouched; train-mode
    /// statistics are returned in [`Forward::stat_updates`].
    pub fn forward_frozen(&self, tape: &mut Tape<T>, x: &Tensor<T>, mode: Mode) -> Result<Forward<T>> {
        self.forward_with(&self.params, tape, x, mode)
    }

    /// Forward pass reading parameter values from `params`, which must be a
    /// store of identical layout (for example a perturbed copy of
    /// [`Network::params`]).
    pub fn forward_with(&self, params: &ParamStore<T>, tape: &mut Tape<T>, x: &Tensor<T>, mode: Mode) -> Result<Forward<T>> {
        let input = self.input(tape, x)?;
        let h = self.head_forward(params, tape, input)?;
        let mut fw = Forward {
            logits: h,
            features: h,
            aggregates: Vec::with_capacity(self.stages.len()),
            stage_outputs: Vec::with_capacity(self.stages.len()),
            stat_updates: Vec::new(),
        };
        let mut cur = h;
        for k in 0..self.stages.len() {
            cur = self.stage_forward(params, k, tape, cur, mode, &mut fw)?;
            fw.stage_outputs.push(cur);
        }
        fw.features = cur;
        fw.logits = self.classifier_forward(params, tape, cur)?;
        Ok(fw)
    }

    pub fn apply_stat_updates(&mut self, updates: &[StatUpdate<T>]) {
        for u in updates {
            if let Some(m) = &mut self.stages[u.stage].nodes[u.node - 1].norm {
                m.stats = u.stats.clone();
            }
        }
    }

    /// Eval-mode logits.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let fw = self.forward_frozen(&mut tape, x, Mode::Eval)?;
        Ok(tape.value(fw.logits).clone())
    }

    /// Eval-mode fraction of rows whose arg-max logit equals the label,
    /// evaluated in chunks of `chunk` rows.
    pub fn accuracy(&self, x: &Tensor<T>, labels: &[usize], chunk: usize) -> Result<f64> {
        if labels.len() != x.rows() {
            return Err(AutodiffError::BatchSizeMismatch { rows: x.rows(), labels: labels.len() }.into());
        }
        if labels.is_empty() {
            return Ok(0.0);
        }
        let chunk = chunk.max(1);
        let mut correct = 0usize;
        let idx: Vec<usize> = (0..x.rows()).collect();
        for part in idx.chunks(chunk) {
            let logits = self.predict(&x.gather_rows(part))?;
            correct += part
                .iter()
                .enumerate()
                .filter(|&(r, &i)| argmax(logits.row(r)) == labels[i])
                .count();
        }
        Ok(correct as f64 / labels.len() as f64)
    }

    fn input(&self, tape: &mut Tape<T>, x: &Tensor<T>) -> Result<Var> {
        if x.cols() != self.spec.input_dim {
            return Err(NetworkError::InputWidth { expected: self.spec.input_dim, got: x.cols() });
        }
        Ok(tape.constant(x.clone()))
    }

    fn head_forward(&self, params: &ParamStore<T>, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let w = tape.param(params, self.head_weight);
        let b = tape.param(params, self.head_bias);
        Ok(tape.linear(x, w, b)?)
    }

    fn classifier_forward(&self, params: &ParamStore<T>, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let w = tape.param(params, self.classifier_weight);
        let b = tape.param(params, self.classifier_bias);
        Ok(tape.linear(x, w, b)?)
    }

    /// One stage in topological order, memoizing node outputs.
    fn stage_forward(&self, params: &ParamStore<T>, k: usize, tape: &mut Tape<T>, x: Var, mode: Mode, fw: &mut Forward<T>) -> Result<Var> {
        let st = &self.stages[k];
        let n = st.graph.n_nodes();
        let batch = tape.value(x).rows();
        let padded = tape.pad_cols(x, st.width_out)?;
        let alpha = tape.param(params, st.alpha);
        let rev = st.graph.reverse_adjacency();
        let mut outputs: Vec<Option<Var>> = vec![None; n];
        outputs[0] = Some(x);
        let mut aggregates = vec![None; n];
        let mut result = padded;
        for i in 1..n {
            let width = if i + 1 < n { st.nodes[i - 1].in_width } else { st.width_out };
            let agg = if rev[i].is_empty() {
                tape.constant(Tensor::zeros(batch, width))
            } else {
                let inputs: Vec<Var> = rev[i]
                    .iter()
                    .map(|&j| match j {
                        0 if width == st.width_in => x,
                        0 => padded,
                        _ => outputs[j].expect("predecessor precedes in topological order"),
                    })
                    .collect();
                let coeffs: Vec<Coeff> = rev[i].iter().map(|&j| Coeff { var: alpha, index: i * n + j }).collect();
                tape.weighted_sum(&inputs, &coeffs)?
            };
            aggregates[i] = Some(agg);
            if i + 1 == n {
                result = agg;
            } else {
                outputs[i] = Some(self.node_forward(params, k, i, tape, agg, mode, fw)?);
            }
        }
        fw.aggregates.push(aggregates);
        Ok(result)
    }

    /// `BN(Linear(ReLU(x)))`, or without the norm when disabled.
    fn node_forward(&self, params: &ParamStore<T>, k: usize, i: usize, tape: &mut Tape<T>, x: Var, mode: Mode, fw: &mut Forward<T>) -> Result<Var> {
        let unit = &self.stages[k].nodes[i - 1];
        let r = tape.relu(x);
        let w = tape.param(params, unit.weight);
        let b = tape.param(params, unit.bias);
        let y = tape.linear(r, w, b)?;
        let Some(norm) = &unit.norm else { return Ok(y) };
        let scale = tape.param(params, norm.scale);
        let shift = tape.param(params, norm.shift);
        let (out, stats) = tape.batch_norm(y, scale, shift, &norm.stats, mode)?;
        if let Some(stats) = stats {
            fw.stat_updates.push(StatUpdate { stage: k, node: i, stats });
        }
        Ok(out)
    }

    /// Reference forward for networks whose stages are all residual
    /// topologies with unit edge weights.
    ///
    /// Each stage runs as an explicit running sum: `s_0` is the stage input
    /// and `s_b = s_{b-1} + block_b(s_{b-1})`, where a block is a chain of
    /// node units. The stage output is the final sum. Node parameters are
    /// shared with [`Network::forward`]; statistics are never installed.
    pub fn natural_residual_forward(&self, tape: &mut Tape<T>, x: &Tensor<T>, mode: Mode) -> Result<Var> {
        let intervals = self
            .stages
            .iter()
            .enumerate()
            .map(|(k, st)| self.residual_interval(k, st))
            .collect::<Result<Vec<_>>>()?;
        let params = &self.params;
        let input = self.input(tape, x)?;
        let mut cur = self.head_forward(params, tape, input)?;
        let mut scratch = Forward {
            logits: cur,
            features: cur,
            aggregates: Vec::new(),
            stage_outputs: Vec::new(),
            stat_updates: Vec::new(),
        };
        for (k, (st, l)) in self.stages.iter().zip(intervals).enumerate() {
            let n = st.graph.n_nodes();
            let mut sum = tape.pad_cols(cur, st.width_out)?;
            for block in 0..(n - 2) / l {
                let first = 1 + block * l;
                let mut h = if block == 0 && st.nodes[0].in_width == st.width_in { cur } else { sum };
                for i in first..first + l {
                    h = self.node_forward(params, k, i, tape, h, mode, &mut scratch)?;
                }
                sum = tape.add(sum, h)?;
            }
            cur = sum;
        }
        self.classifier_forward(params, tape, cur)
    }

    fn residual_interval(&self, k: usize, st: &Stage<T>) -> Result<usize> {
        let n = st.graph.n_nodes();
        let l = (1..=n.saturating_sub(2))
            .filter(|l| (n - 2).is_multiple_of(*l))
            .find(|&l| residual_graph(n, l).is_ok_and(|g| g == st.graph))
            .ok_or(NetworkError::NotResidual(k))?;
        let a = self.params.value(st.alpha).data();
        if st.graph.edges().any(|e| a[e.to * n + e.from] != T::one()) {
            return Err(NetworkError::AlphaNotOne(k));
        }
        Ok(l)
    }
}

/// Index of the largest entry; the first wins ties.
pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
