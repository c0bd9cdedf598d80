//! Polymerized-feature domain adaptation for dose map prediction.

pub mod attention;
pub mod container;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod network;
pub mod phantom;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use tensor::Tensor;
