//! Dense tensors, a reverse-mode tape, and AdamW.

pub mod graph;
pub mod optim;
pub mod params;
pub mod tensor;

pub use graph::{gelu_scalar, AttentionLayout, Gradients, Graph, Var};
pub use optim::{AdamWConfig, AdamWState};
pub use params::{ParamId, ParamStore, Parameter};
pub use tensor::{matmul, DType, Scalar, Tensor};
