pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod expressiveness;
pub mod gcpn;
pub mod generation;
pub mod graphaf;
pub mod gnn;
pub mod molgraph;
pub mod nn;
pub mod pipeline;
pub mod rl;
pub mod scalar;
pub mod scorers;
pub mod smiles;

pub use pipeline::Real;
