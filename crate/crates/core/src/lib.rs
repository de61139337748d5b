//! Shifted-window vision transformer inference with post-training
//! quantization (FP32 / FP16 / INT8 engines), toy-scale training, dataset
//! handling and a latency/accuracy benchmark harness.

pub mod bench;
pub mod data;
pub mod engine;
pub mod error;
pub mod model;
pub mod pipeline;
pub mod quant;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
