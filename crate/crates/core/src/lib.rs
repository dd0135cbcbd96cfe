//! Sparse-MLP: an MLP-Mixer whose later blocks replace the token- and
//! channel-mixing MLPs with sparsely gated mixture-of-experts layers.
//!
//! Everything runs on a small reverse-mode engine over `f64` tensors
//! ([`graph`]), which keeps finite-difference gradient checks meaningful.

pub mod config;
pub mod data;
pub mod error;
pub mod graph;
pub mod io;
pub mod model;
pub mod moe;
pub mod nn;
pub mod params;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use params::ParamStore;
pub use rng::Rng;
pub use tensor::Tensor;
