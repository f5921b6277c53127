//! Stage topologies as index-ordered DAGs.
//!
//! A [`Graph`] holds the node count of one stage and its edge set. Node
//! indices double as topological order: every edge runs from a lower index
//! to a higher one, so acyclicity holds by construction. Node 0 is the input
//! node and node `n - 1` the output node. Continuous edge weights live in an
//! [`AlphaMatrix`], stored row-per-destination like an adjacency matrix.

mod generators;
mod text;

pub use generators::{
    classic_random_graph, complete_graph, random_graph, residual_graph, ClassicKind, TopologySpec,
};
pub use text::{parse_text, to_text};

use std::cmp::Ordering;
use std::collections::BTreeSet;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("graph needs at least {min} nodes, got {n}")]
    TooFewNodes { n: usize, min: usize },
    #[error("edge ({from},{to}) violates topological order")]
    EdgeOrder { from: usize, to: usize },
    #[error("edge ({from},{to}) out of range for {n} nodes")]
    EdgeOutOfRange { from: usize, to: usize, n: usize },
    #[error("interval must divide n-2 (n={n}, interval={interval})")]
    IntervalDoesNotDivide { n: usize, interval: usize },
    #[error("probability {0} outside [0, 1]")]
    InvalidProbability(f64),
    #[error("invalid generator parameters: {0}")]
    InvalidParameter(String),
    #[error("threshold must be nonnegative, got {0}")]
    NegativeThreshold(f64),
    #[error("node {idx} is not an internal node of a {n}-node graph")]
    NotInternal { idx: usize, n: usize },
    #[error("alpha matrix does not conform to graph: {0}")]
    AlphaMismatch(String),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

pub type Result<T> = std::result::Result<T, GraphError>;

/// Directed edge `from -> to` with `from < to`.
///
/// Ordered by destination first, then source, which is the row-major order
/// of the alpha matrix and the order of the text format.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Edge {
    pub from: usize,
    pub to: usize,
}

impl Edge {
    pub fn new(from: usize, to: usize) -> Self {
        Edge { from, to }
    }
}

impl Ord for Edge {
    fn cmp(&self, other: &Self) -> Ordering {
        (self.to, self.from).cmp(&(other.to, other.from))
    }
}

impl PartialOrd for Edge {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Graph {
    n_nodes: usize,
    edges: BTreeSet<Edge>,
}

impl Graph {
    /// Builds a graph from `(from, to)` pairs, dropping duplicates.
    pub fn new(n_nodes: usize, edge_list: &[(usize, usize)]) -> Result<Self> {
        if n_nodes < 2 {
            return Err(GraphError::TooFewNodes { n: n_nodes, min: 2 });
        }
        let mut edges = BTreeSet::new();
        for &(from, to) in edge_list {
            if from >= to {
                return Err(GraphError::EdgeOrder { from, to });
            }
            if to >= n_nodes {
                return Err(GraphError::EdgeOutOfRange { from, to, n: n_nodes });
            }
            edges.insert(Edge { from, to });
        }
        Ok(Graph { n_nodes, edges })
    }

    pub(crate) fn from_set(n_nodes: usize, edges: BTreeSet<Edge>) -> Self {
        debug_assert!(edges.iter().all(|e| e.from < e.to && e.to < n_nodes));
        Graph { n_nodes, edges }
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn input(&self) -> usize {
        0
    }

    pub fn output(&self) -> usize {
        self.n_nodes - 1
    }

    pub fn internal_nodes(&self) -> std::ops::Range<usize> {
        1..self.n_nodes - 1
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    /// Edges in `(to, from)` lexicographic order.
    pub fn edges(&self) -> impl Iterator<Item = Edge> + '_ {
        self.edges.iter().copied()
    }

    pub fn edge_pairs(&self) -> Vec<(usize, usize)> {
        self.edges.iter().map(|e| (e.from, e.to)).collect()
    }

    pub fn has_edge(&self, from: usize, to: usize) -> bool {
        self.edges.contains(&Edge { from, to })
    }

    /// Sources of the edges entering `node`, ascending.
    pub fn predecessors(&self, node: usize) -> Vec<usize> {
        self.edges
            .range(Edge::new(0, node)..=Edge::new(node, node))
            .map(|e| e.from)
            .collect()
    }

    pub fn successors(&self, node: usize) -> Vec<usize> {
        self.edges.iter().filter(|e| e.from == node).map(|e| e.to).collect()
    }

    /// Reverse adjacency: for each node, the sources of its incoming edges.
    pub fn reverse_adjacency(&self) -> Vec<Vec<usize>> {
        let mut rev = vec![Vec::new(); self.n_nodes];
        for e in &self.edges {
            rev[e.to].push(e.from);
        }
        rev
    }

    pub fn in_degrees(&self) -> Vec<usize> {
        let mut d = vec![0; self.n_nodes];
        for e in &self.edges {
            d[e.to] += 1;
        }
        d
    }

    pub fn out_degrees(&self) -> Vec<usize> {
        let mut d = vec![0; self.n_nodes];
        for e in &self.edges {
            d[e.from] += 1;
        }
        d
    }

    /// Number of distinct directed paths from the input to the output node.
    ///
    /// Accumulated in index order: `paths[i] = sum of paths[j]` over edges
    /// `j -> i`. Saturates at `u128::MAX`.
    pub fn path_count(&self) -> u128 {
        let mut paths = vec![0u128; self.n_nodes];
        paths[0] = 1;
        for e in &self.edges {
            // edges are ordered by destination, so every source is final here
            paths[e.to] = paths[e.to].saturating_add(paths[e.from]);
        }
        paths[self.n_nodes - 1]
    }

    pub fn metrics(&self) -> TopologyMetrics {
        TopologyMetrics {
            in_degrees: self.in_degrees(),
            out_degrees: self.out_degrees(),
            edge_count: self.edge_count(),
            input_output_path_count: self.path_count(),
        }
    }

    /// Keeps the nodes flagged in `keep`, compacting indices in order.
    /// Input and output must be kept.
    pub fn induced(&self, keep: &[bool]) -> Graph {
        assert_eq!(keep.len(), self.n_nodes);
        assert!(keep[0] && keep[self.n_nodes - 1]);
        let mut new_index = vec![usize::MAX; self.n_nodes];
        let mut next = 0;
        for (i, &k) in keep.iter().enumerate() {
            if k {
                new_index[i] = next;
                next += 1;
            }
        }
        let edges = self
            .edges
            .iter()
            .filter(|e| keep[e.from] && keep[e.to])
            .map(|e| Edge::new(new_index[e.from], new_index[e.to]))
            .collect();
        Graph::from_set(next, edges)
    }

    /// Deletes an internal node and its incident edges.
    pub fn remove_node(&self, idx: usize) -> Result<Graph> {
        if idx == 0 || idx + 1 >= self.n_nodes {
            return Err(GraphError::NotInternal { idx, n: self.n_nodes });
        }
        let mut keep = vec![true; self.n_nodes];
        keep[idx] = false;
        Ok(self.induced(&keep))
    }

    /// Repeatedly drops internal nodes with zero in-degree or zero
    /// out-degree until none remain. Returns the surviving graph and the
    /// removed original indices in ascending order.
    pub fn eliminate_dead_nodes(&self) -> (Graph, Vec<usize>) {
        let keep = self.live_nodes();
        let removed = keep
            .iter()
            .enumerate()
            .filter(|(_, &k)| !k)
            .map(|(i, _)| i)
            .collect();
        (self.induced(&keep), removed)
    }

    /// Liveness mask produced by the dead-node fixpoint.
    pub fn live_nodes(&self) -> Vec<bool> {
        let n = self.n_nodes;
        let mut keep = vec![true; n];
        let mut in_deg = self.in_degrees();
        let mut out_deg = self.out_degrees();
        loop {
            let dead: Vec<usize> = (1..n - 1)
                .filter(|&i| keep[i] && (in_deg[i] == 0 || out_deg[i] == 0))
                .collect();
            if dead.is_empty() {
                return keep;
            }
            for i in dead {
                keep[i] = false;
                for e in &self.edges {
                    if e.from == i && keep[e.to] {
                        in_deg[e.to] -= 1;
                    }
                    if e.to == i && keep[e.from] {
                        out_deg[e.from] -= 1;
                    }
                }
            }
        }
    }

    /// Keeps exactly the edges with `|alpha| >= threshold`; pruned entries
    /// are zeroed in the returned matrix.
    pub fn prune_edges(&self, alpha: &AlphaMatrix, threshold: f64) -> Result<(Graph, AlphaMatrix)> {
        if !(threshold >= 0.0) {
            return Err(GraphError::NegativeThreshold(threshold));
        }
        alpha.check_conforms(self)?;
        let mut pruned = alpha.clone();
        let mut edges = BTreeSet::new();
        for e in &self.edges {
            if (alpha.get(e.from, e.to) as f64).abs() >= threshold {
                edges.insert(*e);
            } else {
                pruned.values[e.to * self.n_nodes + e.from] = 0.0;
            }
        }
        Ok((Graph::from_set(self.n_nodes, edges), pruned))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TopologyMetrics {
    pub in_degrees: Vec<usize>,
    pub out_degrees: Vec<usize>,
    pub edge_count: usize,
    pub input_output_path_count: u128,
}

/// Base-2 logarithm of the number of discrete sub-topologies of a network
/// whose stages are complete graphs of the given sizes.
pub fn search_space_log2(stage_sizes: &[usize]) -> Result<u64> {
    stage_sizes.iter().try_fold(0u64, |acc, &n| {
        if n < 2 {
            return Err(GraphError::TooFewNodes { n, min: 2 });
        }
        Ok(acc + (n as u64) * (n as u64 - 1) / 2)
    })
}

/// Continuous edge weights of one stage.
///
/// Row `i`, column `j` holds the weight of edge `j -> i`; everything on or
/// above the diagonal and every absent edge is exactly zero.
#[derive(Debug, Clone, PartialEq)]
pub struct AlphaMatrix {
    n_nodes: usize,
    values: Vec<f32>,
}

impl AlphaMatrix {
    pub fn zeros(n_nodes: usize) -> Self {
        AlphaMatrix { n_nodes, values: vec![0.0; n_nodes * n_nodes] }
    }

    /// Weight 1 on every edge of `graph`.
    pub fn ones(graph: &Graph) -> Self {
        Self::filled(graph, 1.0)
    }

    pub fn filled(graph: &Graph, value: f32) -> Self {
        let mut a = Self::zeros(graph.n_nodes());
        for e in graph.edges() {
            a.values[e.to * a.n_nodes + e.from] = value;
        }
        a
    }

    /// Wraps a row-major `n x n` buffer, checking it against `graph`.
    pub fn from_values(graph: &Graph, values: Vec<f32>) -> Result<Self> {
        let n = graph.n_nodes();
        if values.len() != n * n {
            return Err(GraphError::AlphaMismatch(format!(
                "expected {} values, got {}",
                n * n,
                values.len()
            )));
        }
        let a = AlphaMatrix { n_nodes: n, values };
        a.check_conforms(graph)?;
        Ok(a)
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    /// Weight of edge `from -> to`.
    pub fn get(&self, from: usize, to: usize) -> f32 {
        self.values[to * self.n_nodes + from]
    }

    /// Sets the weight of `from -> to`. Callers keep the support inside the
    /// owning graph's edge set.
    pub fn set(&mut self, from: usize, to: usize, value: f32) {
        assert!(from < to && to < self.n_nodes, "alpha entry ({from},{to}) outside lower triangle");
        self.values[to * self.n_nodes + from] = value;
    }

    /// Row-major values, row = destination node.
    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn l1_norm(&self) -> f64 {
        self.values.iter().map(|v| (*v as f64).abs()).sum()
    }

    pub fn check_conforms(&self, graph: &Graph) -> Result<()> {
        let n = graph.n_nodes();
        if self.n_nodes != n {
            return Err(GraphError::AlphaMismatch(format!(
                "matrix is {}x{}, graph has {} nodes",
                self.n_nodes, self.n_nodes, n
            )));
        }
        for to in 0..n {
            for from in 0..n {
                let v = self.values[to * n + from];
                if v != 0.0 && !graph.has_edge(from, to) {
                    return Err(GraphError::AlphaMismatch(format!(
                        "nonzero weight {v} on absent edge ({from},{to})"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Restricts to the nodes flagged in `keep`, matching [`Graph::induced`].
    pub fn induced(&self, keep: &[bool]) -> AlphaMatrix {
        let idx: Vec<usize> = (0..self.n_nodes).filter(|&i| keep[i]).collect();
        let m = idx.len();
        let mut out = AlphaMatrix::zeros(m);
        for (r, &to) in idx.iter().enumerate() {
            for (c, &from) in idx.iter().enumerate() {
                out.values[r * m + c] = self.values[to * self.n_nodes + from];
            }
        }
        out
    }
}
