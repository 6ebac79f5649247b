//! Minimal tensor engine: dense tensors, layer kernels, a reverse-mode
//! tape and the Adam optimizer. Every routine is generic over [`Scalar`].

mod adam;
mod graph;
pub mod ops;
mod scalar;
mod tensor;

pub use adam::AdamState;
pub use graph::{Graph, Var};
pub use ops::{ConvMeta, LayerKind, LayerParams};
pub use scalar::Scalar;
pub use tensor::Tensor;
