//! Per-round clustering of the participant subgraph.

pub mod gae;
pub mod hdbscan;
pub mod kmeans;

pub use gae::{
    assign, encode, estimate_num_clusters, fit, fit_with_clusters, losses, normalized_adjacency, objective, reconstruct,
    subgraph_extract, Encoder, GaeConfig, GaeGrads, GaeState, Losses, SubGraph,
};
