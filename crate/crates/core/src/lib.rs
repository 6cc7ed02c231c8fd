//! Deterministic federated-learning simulator with a graph-clustering
//! backdoor defense, reference baselines and an evaluation harness.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attacks;
pub mod baselines;
pub mod clustering;
pub mod data;
pub mod defense;
pub mod error;
pub mod graph;
pub mod harness;
pub mod model;
pub mod rng;
pub mod sim;
pub mod stats;
pub mod task;

pub use error::{Error, Result};
pub use model::FlatModel;
