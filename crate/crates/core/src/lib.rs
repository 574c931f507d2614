pub mod ablation;
pub mod checkpoint;
pub mod cit;
pub mod cli;
pub mod config;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod head;
pub mod io;
pub mod metrics;
pub mod model;
pub mod params;
pub mod rng;
pub mod scenes;
pub mod suite;
pub mod graph;
pub mod kernels;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use graph::{Graph, NodeId};
pub use tensor::Tensor;
