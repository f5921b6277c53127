//! Topology generators: complete, residual, random, and the classical
//! ER / BA / WS families re-oriented into index-ordered DAGs.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{Edge, Graph, GraphError, Result};
use crate::rng;

/// Every pair `j < i` connected.
pub fn complete_graph(n: usize) -> Result<Graph> {
    if n < 2 {
        return Err(GraphError::TooFewNodes { n, min: 2 });
    }
    let edges = (1..n).flat_map(|i| (0..i).map(move |j| Edge::new(j, i))).collect();
    Ok(Graph::from_set(n, edges))
}

/// Unrolled residual stack with `interval` layers per residual block.
///
/// Internal nodes form consecutive blocks of `interval` nodes chained
/// inside each block. The first node of a block reads the input node and
/// the last node of every earlier block; the output node reads the input
/// node and the last node of every block. `interval = 1` is the complete
/// graph.
pub fn residual_graph(n: usize, interval: usize) -> Result<Graph> {
    if n < 3 {
        return Err(GraphError::TooFewNodes { n, min: 3 });
    }
    if interval == 0 || !(n - 2).is_multiple_of(interval) {
        return Err(GraphError::IntervalDoesNotDivide { n, interval });
    }
    let blocks = (n - 2) / interval;
    let first = |b: usize| 1 + b * interval;
    let last = |b: usize| b * interval + interval;
    let mut edges = BTreeSet::new();
    for b in 0..blocks {
        for m in first(b)..last(b) {
            edges.insert(Edge::new(m, m + 1));
        }
        edges.insert(Edge::new(0, first(b)));
        for earlier in 0..b {
            edges.insert(Edge::new(last(earlier), first(b)));
        }
        edges.insert(Edge::new(last(b), n - 1));
    }
    edges.insert(Edge::new(0, n - 1));
    Ok(Graph::from_set(n, edges))
}

/// Each internal pair linked independently with probability `p`, then
/// repaired so every internal node has a predecessor and a successor.
pub fn random_graph(n: usize, p: f64, seed: u64) -> Result<Graph> {
    if n < 2 {
        return Err(GraphError::TooFewNodes { n, min: 2 });
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(GraphError::InvalidProbability(p));
    }
    let mut rng = rng::seeded(seed);
    let mut edges = BTreeSet::new();
    for i in 1..n - 1 {
        for j in 1..i {
            if rng.random_bool(p) {
                edges.insert(Edge::new(j, i));
            }
        }
    }
    Ok(repair(n, edges))
}

/// Attaches orphaned internal nodes to the input (no predecessor) and to
/// the output (no successor).
fn repair(n: usize, mut edges: BTreeSet<Edge>) -> Graph {
    let mut has_in = vec![false; n];
    let mut has_out = vec![false; n];
    for e in &edges {
        has_in[e.to] = true;
        has_out[e.from] = true;
    }
    for i in 1..n - 1 {
        if !has_in[i] {
            edges.insert(Edge::new(0, i));
        }
        if !has_out[i] {
            edges.insert(Edge::new(i, n - 1));
        }
    }
    if n == 2 {
        edges.insert(Edge::new(0, 1));
    }
    Graph::from_set(n, edges)
}

/// Classical undirected random-graph families.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum ClassicKind {
    /// Erdős–Rényi G(n, p).
    Er { p: f64 },
    /// Barabási–Albert preferential attachment with `m` edges per new node.
    Ba { m: usize },
    /// Watts–Strogatz ring lattice of degree `k`, rewired with probability `p`.
    Ws { k: usize, p: f64 },
}

/// Generates `kind` on `n_internal` nodes, shuffles a node ordering,
/// orients edges along it, and wraps the result with input and output
/// nodes before repairing orphans.
pub fn classic_random_graph(kind: ClassicKind, n_internal: usize, seed: u64) -> Result<Graph> {
    let mut rng = rng::seeded(seed);
    let undirected = match kind {
        ClassicKind::Er { p } => erdos_renyi(n_internal, p, &mut rng)?,
        ClassicKind::Ba { m } => barabasi_albert(n_internal, m, &mut rng)?,
        ClassicKind::Ws { k, p } => watts_strogatz(n_internal, k, p, &mut rng)?,
    };
    let mut order: Vec<usize> = (0..n_internal).collect();
    order.shuffle(&mut rng);
    let mut position = vec![0; n_internal];
    for (pos, &node) in order.iter().enumerate() {
        position[node] = pos;
    }
    let edges = undirected
        .into_iter()
        .map(|(u, v)| {
            let (a, b) = (position[u], position[v]);
            Edge::new(a.min(b) + 1, a.max(b) + 1)
        })
        .collect();
    Ok(repair(n_internal + 2, edges))
}

fn erdos_renyi(n: usize, p: f64, rng: &mut rng::Rng) -> Result<BTreeSet<(usize, usize)>> {
    if n < 1 {
        return Err(GraphError::InvalidParameter("ER needs at least one internal node".into()));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(GraphError::InvalidProbability(p));
    }
    let mut edges = BTreeSet::new();
    for u in 0..n {
        for v in u + 1..n {
            if rng.random_bool(p) {
                edges.insert((u, v));
            }
        }
    }
    Ok(edges)
}

fn barabasi_albert(n: usize, m: usize, rng: &mut rng::Rng) -> Result<BTreeSet<(usize, usize)>> {
    if m < 1 || m >= n {
        return Err(GraphError::InvalidParameter(format!("BA needs 1 <= m < n (m={m}, n={n})")));
    }
    let mut edges = BTreeSet::new();
    let mut targets: Vec<usize> = (0..m).collect();
    let mut repeated: Vec<usize> = Vec::new();
    for source in m..n {
        for &t in &targets {
            edges.insert((t.min(source), t.max(source)));
        }
        repeated.extend_from_slice(&targets);
        repeated.extend(std::iter::repeat_n(source, m));
        // m distinct targets, chosen proportionally to degree
        targets.clear();
        while targets.len() < m {
            let pick = repeated[rng.random_range(0..repeated.len())];
            if !targets.contains(&pick) {
                targets.push(pick);
            }
        }
    }
    Ok(edges)
}

fn watts_strogatz(n: usize, k: usize, p: f64, rng: &mut rng::Rng) -> Result<BTreeSet<(usize, usize)>> {
    if !k.is_multiple_of(2) || k >= n {
        return Err(GraphError::InvalidParameter(format!("WS needs even k < n (k={k}, n={n})")));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(GraphError::InvalidProbability(p));
    }
    let key = |a: usize, b: usize| (a.min(b), a.max(b));
    let mut edges = BTreeSet::new();
    for j in 1..=k / 2 {
        for u in 0..n {
            edges.insert(key(u, (u + j) % n));
        }
    }
    let degree = |edges: &BTreeSet<(usize, usize)>, u: usize| {
        edges.iter().filter(|&&(a, b)| a == u || b == u).count()
    };
    for j in 1..=k / 2 {
        for u in 0..n {
            if !rng.random_bool(p) {
                continue;
            }
            let v = (u + j) % n;
            if !edges.contains(&key(u, v)) || degree(&edges, u) >= n - 1 {
                continue;
            }
            let mut w = rng.random_range(0..n);
            while w == u || edges.contains(&key(u, w)) {
                w = rng.random_range(0..n);
            }
            edges.remove(&key(u, v));
            edges.insert(key(u, w));
        }
    }
    Ok(edges)
}

/// Per-stage topology description used by network construction and configs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum TopologySpec {
    Complete,
    Residual { interval: usize },
    Random { p: f64 },
    Er { p: f64 },
    Ba { m: usize },
    Ws { k: usize, p: f64 },
}

impl TopologySpec {
    pub fn generate(&self, n_nodes: usize, seed: u64) -> Result<Graph> {
        let internal = || {
            if n_nodes < 3 {
                Err(GraphError::TooFewNodes { n: n_nodes, min: 3 })
            } else {
                Ok(n_nodes - 2)
            }
        };
        match *self {
            TopologySpec::Complete => complete_graph(n_nodes),
            TopologySpec::Residual { interval } => residual_graph(n_nodes, interval),
            TopologySpec::Random { p } => random_graph(n_nodes, p, seed),
            TopologySpec::Er { p } => classic_random_graph(ClassicKind::Er { p }, internal()?, seed),
            TopologySpec::Ba { m } => classic_random_graph(ClassicKind::Ba { m }, internal()?, seed),
            TopologySpec::Ws { k, p } => classic_random_graph(ClassicKind::Ws { k, p }, internal()?, seed),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn binom2(n: usize) -> usize {
        n * (n - 1) / 2
    }

    fn assert_well_formed(g: &Graph) {
        let pairs = g.edge_pairs();
        let unique: BTreeSet<_> = pairs.iter().collect();
        assert_eq!(unique.len(), pairs.len());
        assert!(pairs.iter().all(|&(j, i)| j < i && i < g.n_nodes()));
    }

    #[test]
    fn complete_examples() {
        assert_eq!(complete_graph(4).unwrap().edge_count(), 6);
        assert_eq!(complete_graph(14).unwrap().edge_count(), 91);
        assert_eq!(complete_graph(2).unwrap().edge_pairs(), vec![(0, 1)]);
        assert!(complete_graph(1).is_err());
        for n in 2..=64 {
            assert_eq!(complete_graph(n).unwrap().edge_count(), binom2(n));
        }
    }

    #[test]
    fn residual_examples() {
        let g = residual_graph(6, 2).unwrap();
        let expected = Graph::new(6, &[(1, 2), (3, 4), (0, 1), (0, 3), (2, 3), (0, 5), (2, 5), (4, 5)]).unwrap();
        assert_eq!(g, expected);
        assert_eq!(residual_graph(6, 1).unwrap(), complete_graph(6).unwrap());
        let err = residual_graph(7, 2).unwrap_err();
        assert!(err.to_string().contains("interval must divide n-2"));
        assert!(residual_graph(2, 1).is_err());
        assert!(residual_graph(6, 0).is_err());
    }

    #[test]
    fn residual_interval_one_is_complete() {
        for n in 3..=40 {
            assert_eq!(residual_graph(n, 1).unwrap(), complete_graph(n).unwrap());
        }
    }

    #[test]
    fn residual_interval_two_matches_edge_formula() {
        for n in (6..=42).step_by(2) {
            let b = (n - 2) / 2;
            let expected = b + binom2(b + 2);
            assert_eq!(residual_graph(n, 2).unwrap().edge_count(), expected, "n={n}");
        }
    }

    #[test]
    fn residual_larger_intervals_stay_well_formed() {
        for (n, l) in [(14, 3), (14, 4), (22, 5), (10, 8)] {
            let g = residual_graph(n, l).unwrap();
            assert_well_formed(&g);
            let b = (n - 2) / l;
            // chain edges + block entries + output gathers
            assert_eq!(g.edge_count(), b * (l - 1) + binom2(b + 1) + b + 1);
        }
    }

    #[test]
    fn random_examples() {
        let g = random_graph(10, 1.0, 3).unwrap();
        assert_eq!(g.edge_count(), binom2(8) + 2);
        assert!(g.has_edge(0, 1) && g.has_edge(8, 9));

        let g = random_graph(10, 0.0, 3).unwrap();
        assert_eq!(g.edge_count(), 16);

        assert_eq!(random_graph(10, 0.4, 7).unwrap(), random_graph(10, 0.4, 7).unwrap());
        assert_eq!(random_graph(10, 1.5, 7).unwrap_err(), GraphError::InvalidProbability(1.5));
        assert_eq!(random_graph(2, 0.5, 1).unwrap().edge_pairs(), vec![(0, 1)]);
    }

    #[test]
    fn classic_examples() {
        let mut rng = rng::seeded(11);
        assert_eq!(barabasi_albert(5, 2, &mut rng).unwrap().len(), 6);
        let mut rng = rng::seeded(11);
        let lattice = watts_strogatz(10, 4, 0.0, &mut rng).unwrap();
        assert_eq!(lattice.len(), 20);
        assert!(lattice.contains(&(0, 9)) && lattice.contains(&(0, 8)));

        let kind = ClassicKind::Er { p: 0.2 };
        assert_eq!(classic_random_graph(kind, 20, 5).unwrap(), classic_random_graph(kind, 20, 5).unwrap());

        assert!(classic_random_graph(ClassicKind::Ba { m: 5 }, 5, 0).is_err());
        assert!(classic_random_graph(ClassicKind::Ba { m: 0 }, 5, 0).is_err());
        assert!(classic_random_graph(ClassicKind::Ws { k: 3, p: 0.1 }, 10, 0).is_err());
        assert!(classic_random_graph(ClassicKind::Ws { k: 10, p: 0.1 }, 10, 0).is_err());
        assert!(classic_random_graph(ClassicKind::Er { p: -0.1 }, 10, 0).is_err());
    }

    #[test]
    fn rewiring_preserves_edge_count() {
        for seed in 0..10 {
            let mut rng = rng::seeded(seed);
            assert_eq!(watts_strogatz(12, 4, 0.75, &mut rng).unwrap().len(), 24);
        }
    }

    #[test]
    fn topology_spec_serde_shape() {
        let spec: TopologySpec = serde_json::from_str(r#"{"kind":"residual","interval":2}"#).unwrap();
        assert_eq!(spec, TopologySpec::Residual { interval: 2 });
        assert_eq!(spec.generate(6, 0).unwrap(), residual_graph(6, 2).unwrap());
        assert!(serde_json::from_str::<TopologySpec>(r#"{"kind":"residual","interval":2,"x":1}"#).is_err());
    }

    fn arb_spec() -> impl Strategy<Value = (TopologySpec, usize)> {
        prop_oneof![
            (3usize..20).prop_map(|n| (TopologySpec::Complete, n)),
            (0.0f64..=1.0, 2usize..20).prop_map(|(p, n)| (TopologySpec::Random { p }, n)),
            (0.0f64..=1.0, 3usize..20).prop_map(|(p, n)| (TopologySpec::Er { p }, n)),
            (1usize..4, 6usize..20).prop_map(|(m, n)| (TopologySpec::Ba { m }, n)),
            (0.0f64..=1.0, 8usize..20).prop_map(|(p, n)| (TopologySpec::Ws { k: 4, p }, n)),
        ]
    }

    proptest! {
        #[test]
        fn generators_are_pure_and_repaired((spec, n) in arb_spec(), seed in any::<u64>()) {
            let g = spec.generate(n, seed).unwrap();
            prop_assert_eq!(&g, &spec.generate(n, seed).unwrap());
            assert_well_formed(&g);
            let ins = g.in_degrees();
            let outs = g.out_degrees();
            for i in g.internal_nodes() {
                prop_assert!(ins[i] > 0 && outs[i] > 0);
            }
            prop_assert!(g.path_count() > 0);
        }
    }
}
