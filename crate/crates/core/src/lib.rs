//! Semi-supervised node classification on graphs: label propagation, GCN,
//! and a GCN trained jointly with a label-propagation loss over learnable
//! edge weights. Small-graph oracles cross-check the influence analysis
//! behind the joint model.

pub mod autodiff;
pub mod cli;
pub mod error;
pub mod gcn;
pub mod graph;
pub mod lpa;
pub mod matrix;
pub mod optim;
pub mod oracles;
pub mod probe;
pub mod unified;

pub use error::{Error, Result};
