//! Multimodal instruction tuning for source-code vulnerability question
//! answering: a code encoder whose token embeddings are projected into a
//! causal language model's embedding space, trained in two stages
//! (projector alignment, then LoRA fine-tuning), plus generation, the
//! evaluation metric suite, and an encoder-only classifier.

pub mod classifier;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod qagen;
pub mod synthetic;
pub mod tokenizer;
pub mod trainer;

pub use error::*;
pub use numerics::{DType, ParamStore, Parameter, Scalar, Tensor};
pub use model::{LlavulModel, ModelConfig, Stage};
pub use tokenizer::TokenizerModel;
