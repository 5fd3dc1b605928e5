pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod ops;
pub mod optim;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{Gradients, Graph, Var};
pub use tensor::Tensor;
pub mod dataset;
pub mod seed;
pub mod backbone;
pub mod model;
pub mod trainer;
pub mod checkpoint;
pub mod cli;
