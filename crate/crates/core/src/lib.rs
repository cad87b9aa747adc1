//! Lossless block drafting on a frozen toy transformer.
//!
//! The target model runs every token through all layers with frozen weights.
//! Draft rows enter only the last few layers, use their own attention
//! projectors, and never write to the KV cache, so target outputs are
//! unaffected by drafting. Drafts are verified with speculative sampling.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod corpus;
pub mod engine;
pub mod error;
pub mod layout;
pub mod model;
pub mod oracle;
pub mod sampler;
pub mod scalar;
pub mod scheduler;
pub mod tensor;
pub mod trainer;

pub use config::ModelConfig;
pub use engine::{DecodeConfig, Engine, Mode};
pub use error::{Error, Result};
pub use model::TokenId;
pub use scalar::Scalar;

pub type Matrix = tensor::Mat<f64>;
pub type Model = model::Transformer<f64>;
pub type Model32 = model::Transformer<f32>;
pub type Kv = model::KvStore<f64>;
pub type Draft = model::DraftWeights<f64>;
