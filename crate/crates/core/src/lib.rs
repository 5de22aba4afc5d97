//! Topology-aware prediction of multiple target brain graphs from a single
//! source graph, using subject clustering and cluster-specific adversarial
//! graph-convolutional generators.

pub mod affinity;
pub mod autodiff;
pub mod clustering;
pub mod data;
pub mod evaluation;
pub mod matrix;
pub mod models;
pub mod special;
pub mod topology;
pub mod training;

pub use matrix::Matrix;
