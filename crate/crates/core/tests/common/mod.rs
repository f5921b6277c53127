#![allow(dead_code)]

use rand::Rng as _;
use toponet::autodiff::{Role, Scalar, Tensor};
use toponet::network::Network;
use toponet::rng;

/// Replaces every non-edge parameter and running statistic with random
/// values so that tests do not lean on the tidy initial state.
pub fn randomize<T: Scalar>(net: &Network<T>, seed: u64) -> Network<T> {
    let mut r = rng::seeded(seed);
    let mut state = net.to_state();
    let mut fill = |t: &mut Tensor<T>, lo: f64, hi: f64| {
        for v in t.data_mut() {
            *v = T::of(r.random_range(lo..hi));
        }
    };
    fill(&mut state.head_weight, -1.0, 1.0);
    fill(&mut state.head_bias, -0.5, 0.5);
    fill(&mut state.classifier_weight, -1.0, 1.0);
    fill(&mut state.classifier_bias, -0.5, 0.5);
    for st in &mut state.stages {
        for node in &mut st.nodes {
            fill(&mut node.weight, -0.8, 0.8);
            fill(&mut node.bias, -0.3, 0.3);
            if let Some(m) = &mut node.norm {
                fill(&mut m.scale, 0.5, 1.5);
                fill(&mut m.shift, -0.3, 0.3);
                let mut mean = Tensor::<T>::zeros(1, m.stats.mean.len());
                fill(&mut mean, -0.5, 0.5);
                let mut var = Tensor::<T>::zeros(1, m.stats.var.len());
                fill(&mut var, 0.5, 2.0);
                m.stats.mean = mean.data().to_vec();
                m.stats.var = var.data().to_vec();
            }
        }
    }
    let out = Network::from_state(state).expect("same shapes");
    debug_assert!(out.params().iter().any(|(_, p)| p.role == Role::EdgeWeight));
    out
}

pub fn random_batch<T: Scalar>(rows: usize, cols: usize, seed: u64) -> Tensor<T> {
    let mut r = rng::seeded(seed);
    let data = (0..rows * cols).map(|_| T::of(r.random_range(-2.0..2.0))).collect();
    Tensor::from_vec(rows, cols, data).unwrap()
}
