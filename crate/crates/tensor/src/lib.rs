//! f64 tensors, reverse-mode autodiff and small neural-net building blocks.
//!
//! Everything is CPU-only, sequential and seeded, trading speed for exact
//! reproducibility: the same graph with the same inputs yields bitwise
//! identical values and gradients on every run.

pub mod ckpt;
pub mod gradcheck;
pub mod graph;
pub mod nn;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tensor;

pub use graph::{Gradients, Graph, NodeId, Unary};
pub use params::{bitwise_eq, ParamStore};
pub use tensor::Tensor;
