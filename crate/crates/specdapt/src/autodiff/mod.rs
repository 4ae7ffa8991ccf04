//! Reverse-mode autodiff: tensors, the op tape, composite layers, and the
//! named parameter store with its checkpoint format.

pub mod graph;
pub mod layers;
pub mod params;
pub mod tensor;

pub use graph::{Gradients, Graph, Mode, NodeId, Padding};
pub use params::ParamStore;
pub use tensor::TensorF;
