//! Differentiable connectivity learning for multi-stage DAG networks.

// `!(x >= 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod autodiff;
pub mod data;
pub mod graph;
pub mod harness;
pub mod network;
pub mod rng;
pub mod trainer;
