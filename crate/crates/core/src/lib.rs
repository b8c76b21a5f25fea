//! End-to-end pipeline for modeling EEG with a small language model:
//! signal preprocessing, a vector-quantized neural tokenizer adversarially
//! aligned with the text embedding space, multi-channel autoregressive
//! pre-training, multi-task instruction tuning, classification metrics,
//! and the binary file formats tying the stages together.

pub mod config;
pub mod dataio;
pub mod nn;
pub mod instruct;
pub mod lm;
pub mod mcar;
pub mod metrics;
pub mod pipeline;
pub mod signal;
pub mod tokenizer;
pub mod optim;
pub mod tensor;

pub use tensor::{Tensor, TensorError};
