mod common;

use common::{random_batch, randomize};
use toponet::autodiff::{Mode, Tape, Tensor};
use toponet::graph::{complete_graph, residual_graph, Graph, TopologySpec};
use toponet::network::{build_network, build_with_graphs, Network, NetworkError, NetworkSpec, StageDef};

fn spec(use_norm: bool) -> NetworkSpec {
    NetworkSpec { input_dim: 5, num_classes: 3, base_width: 8, use_norm }
}

#[test]
fn topological_and_natural_residual_forward_agree() {
    for l in [1, 2] {
        for n in [6, 10, 14] {
            for seed in 0..10u64 {
                let defs = [StageDef { nodes: n, topology: TopologySpec::Residual { interval: l } }; 2];
                let net = randomize(&build_network(&defs, spec(true), seed).unwrap(), seed + 100);
                let x = random_batch::<f32>(6, 5, seed + 200);
                for mode in [Mode::Eval, Mode::Train] {
                    let mut t1 = Tape::new();
                    let fw = net.forward_frozen(&mut t1, &x, mode).unwrap();
                    let mut t2 = Tape::new();
                    let nat = net.natural_residual_forward(&mut t2, &x, mode).unwrap();
                    let diff = t1.value(fw.logits).max_abs_diff(t2.value(nat));
                    assert!(diff < 1e-5, "l={l} n={n} seed={seed} {mode:?}: {diff}");
                }
            }
        }
    }
}

#[test]
fn complete_stage_matches_interval_one() {
    let graphs = vec![complete_graph(7).unwrap()];
    assert_eq!(graphs[0], residual_graph(7, 1).unwrap());
    let net = randomize(&build_with_graphs(graphs, spec(true), 4).unwrap(), 5);
    let x = random_batch::<f32>(4, 5, 6);
    let mut t1 = Tape::new();
    let fw = net.forward_frozen(&mut t1, &x, Mode::Eval).unwrap();
    let mut t2 = Tape::new();
    let nat = net.natural_residual_forward(&mut t2, &x, Mode::Eval).unwrap();
    assert!(t1.value(fw.logits).max_abs_diff(t2.value(nat)) < 1e-5);
}

#[test]
fn natural_forward_rejects_other_topologies_and_weights() {
    let net = build_with_graphs(vec![complete_graph(6).unwrap(), residual_graph(6, 2).unwrap()], spec(true), 0).unwrap();
    let x = random_batch::<f32>(2, 5, 0);
    let mut ok = net.clone();
    let mut a = ok.alpha_matrix(1).unwrap();
    a.set(0, 1, 0.5);
    ok.set_alpha(1, &a).unwrap();
    assert_eq!(ok.natural_residual_forward(&mut Tape::new(), &x, Mode::Eval).unwrap_err(), NetworkError::AlphaNotOne(1));

    let chain = Graph::new(6, &[(0, 1), (1, 2), (2, 3), (3, 4), (4, 5)]).unwrap();
    let net = build_with_graphs(vec![chain], spec(true), 0).unwrap();
    assert_eq!(net.natural_residual_forward(&mut Tape::new(), &x, Mode::Eval).unwrap_err(), NetworkError::NotResidual(0));
}

#[test]
fn zero_input_without_bias_or_norm_gives_zero_features() {
    for graph in [residual_graph(10, 2).unwrap(), complete_graph(6).unwrap()] {
        let net = build_with_graphs(vec![graph.clone(), graph], spec(false), 3).unwrap();
        let mut state = randomize(&net, 1).to_state();
        state.head_bias.fill(0.0);
        for st in &mut state.stages {
            for node in &mut st.nodes {
                node.bias.fill(0.0);
            }
        }
        let net = Network::from_state(state).unwrap();
        let x = Tensor::zeros(3, 5);
        let mut t1 = Tape::new();
        let fw = net.forward_frozen(&mut t1, &x, Mode::Eval).unwrap();
        assert!(t1.value(fw.features).data().iter().all(|&v| v == 0.0));
        let mut t2 = Tape::new();
        let logits = net.natural_residual_forward(&mut t2, &x, Mode::Eval).unwrap();
        assert_eq!(t1.value(fw.logits), t2.value(logits));
    }
}

#[test]
fn pass_through_stages_compose_head_and_classifier() {
    let defs = [StageDef { nodes: 2, topology: TopologySpec::Complete }; 3];
    let net = randomize(&build_network(&defs, spec(false), 2).unwrap(), 3);
    let x = random_batch::<f32>(4, 5, 1);
    let state = net.to_state();
    // head, zero-pad to 32 columns, classifier
    let mut expected = Tensor::<f32>::zeros(4, 3);
    for r in 0..4 {
        let mut h = [0.0f32; 32];
        for (c, hc) in h.iter_mut().enumerate().take(8) {
            *hc = (0..5).map(|i| x.get(r, i) * state.head_weight.get(i, c)).sum::<f32>() + state.head_bias.get(0, c);
        }
        for c in 0..3 {
            let v: f32 = (0..32).map(|i| h[i] * state.classifier_weight.get(i, c)).sum::<f32>() + state.classifier_bias.get(0, c);
            expected.set(r, c, v);
        }
    }
    let logits = net.predict(&x).unwrap();
    assert!(logits.max_abs_diff(&expected) < 1e-5);
}

#[test]
fn eval_forward_is_bit_deterministic_and_row_equivariant() {
    let defs = [StageDef { nodes: 8, topology: TopologySpec::Random { p: 0.4 } }; 2];
    let net = randomize(&build_network(&defs, spec(true), 11).unwrap(), 12);
    let x = random_batch::<f32>(7, 5, 13);
    let a = net.predict(&x).unwrap();
    assert_eq!(a, net.predict(&x).unwrap());
    let perm = [3, 0, 6, 1, 5, 2, 4];
    let b = net.predict(&x.gather_rows(&perm)).unwrap();
    for (r, &p) in perm.iter().enumerate() {
        assert_eq!(b.row(r), a.row(p));
    }
}

#[test]
fn doubling_an_edge_weight_doubles_its_contribution() {
    let graphs = vec![complete_graph(6).unwrap()];
    let mut net = build_with_graphs(graphs, spec(true), 8).unwrap();
    let x = random_batch::<f32>(4, 5, 9).data().iter().map(|v| v.abs() + 0.1).collect::<Vec<_>>();
    let x = Tensor::from_vec(4, 5, x).unwrap();
    let aggregate = |net: &Network| {
        let mut tape = Tape::new();
        let fw = net.forward_frozen(&mut tape, &x, Mode::Eval).unwrap();
        tape.value(fw.aggregates[0][3].unwrap()).clone()
    };
    // isolate edge 1 -> 3
    let mut a = net.alpha_matrix(0).unwrap();
    a.set(0, 3, 0.0);
    a.set(2, 3, 0.0);
    a.set(1, 3, 0.7);
    net.set_alpha(0, &a).unwrap();
    let base = aggregate(&net);
    a.set(1, 3, 1.4);
    net.set_alpha(0, &a).unwrap();
    let doubled = aggregate(&net);
    for (d, b) in doubled.data().iter().zip(base.data()) {
        assert_eq!(*d, 2.0 * b);
    }

    // with the other inputs restored the difference is the edge's contribution
    let mut full = net.alpha_matrix(0).unwrap();
    full.set(0, 3, 1.0);
    full.set(2, 3, 1.0);
    full.set(1, 3, 0.7);
    net.set_alpha(0, &full).unwrap();
    let one = aggregate(&net);
    full.set(1, 3, 1.4);
    net.set_alpha(0, &full).unwrap();
    let two = aggregate(&net);
    for ((t, o), b) in two.data().iter().zip(one.data()).zip(base.data()) {
        assert!((t - o - b).abs() < 1e-5);
    }
}

#[test]
fn in_degree_zero_node_emits_transform_of_zero() {
    let g = Graph::new(5, &[(0, 2), (1, 3), (2, 3), (3, 4)]).unwrap();
    let net = randomize(&build_with_graphs(vec![g], spec(false), 1).unwrap(), 2);
    let x = random_batch::<f32>(3, 5, 3);
    let mut tape = Tape::new();
    let fw = net.forward_frozen(&mut tape, &x, Mode::Eval).unwrap();
    let agg = tape.value(fw.aggregates[0][1].unwrap());
    assert!(agg.data().iter().all(|&v| v == 0.0));
    assert_eq!(agg.shape(), (3, 8));
}

#[test]
fn removing_sink_nodes_preserves_outputs() {
    // node 2 has no successors; after its removal node 1 loses one but keeps another
    let g = Graph::new(6, &[(0, 1), (1, 2), (1, 3), (0, 4), (3, 4), (4, 5), (1, 5)]).unwrap();
    let net = randomize(&build_with_graphs(vec![g.clone(), g], spec(true), 3).unwrap(), 4);
    let (pruned, kept) = net.eliminate_dead_nodes().unwrap();
    assert_eq!(kept, vec![vec![0, 1, 3, 4, 5]; 2]);
    let x = random_batch::<f32>(5, 5, 1);
    assert!(net.predict(&x).unwrap().max_abs_diff(&pruned.predict(&x).unwrap()) < 1e-6);
}

#[test]
fn removing_source_nodes_may_change_outputs() {
    let g = Graph::new(5, &[(0, 2), (1, 3), (2, 3), (3, 4)]).unwrap();
    let mut state = build_with_graphs(vec![g], spec(false), 1).unwrap().to_state();
    state.stages[0].nodes[0].bias.fill(0.5);
    let net = Network::from_state(state).unwrap();
    let (pruned, kept) = net.eliminate_dead_nodes().unwrap();
    assert_eq!(kept[0], vec![0, 2, 3, 4]);
    let x = random_batch::<f32>(3, 5, 3);
    assert!(net.predict(&x).unwrap().max_abs_diff(&pruned.predict(&x).unwrap()) > 1e-3);
}

#[test]
fn train_mode_updates_statistics_only_through_forward() {
    let defs = [StageDef { nodes: 5, topology: TopologySpec::Complete }];
    let mut net = build_network(&defs, spec(true), 0).unwrap();
    let before = net.fingerprint();
    let x = random_batch::<f32>(6, 5, 2);
    net.forward_frozen(&mut Tape::new(), &x, Mode::Train).unwrap();
    assert_eq!(net.fingerprint(), before);
    net.forward(&mut Tape::new(), &x, Mode::Eval).unwrap();
    assert_eq!(net.fingerprint(), before);
    net.forward(&mut Tape::new(), &x, Mode::Train).unwrap();
    assert_ne!(net.fingerprint(), before);
}
