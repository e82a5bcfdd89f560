//! Foundation-expert recommender testbed.
//!
//! A streaming-trained target-aware foundation model, lightweight per-surface
//! expert models consuming its embeddings, the serving/sync/versioning
//! machinery that connects them, and an evaluation harness that measures how
//! well foundation-model gains transfer to the experts, all running against a
//! synthetic multi-surface interaction stream with a known ground truth.

pub mod config;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod experiments;
pub mod expert;
pub mod fm;
pub mod graph;
pub mod params;
pub mod pipeline;
pub mod rng;
pub mod serving;
pub mod stream;
pub mod tensor;
pub mod wire;

pub use error::{Error, Result};
pub use graph::{AttentionMask, Gradients, Tape, Var};
pub use params::{adam_step, AdamConfig, AdamState, ParamBlock, ParamSet};
pub use tensor::Tensor;
