//! Autoregressive recommender transformer trained on context-item-feedback
//! histories.
//!
//! The crate covers the full desk-scale pipeline: a synthetic user-behaviour
//! world, event-log ingestion, a small reverse-mode tensor engine, the causal
//! encoder with hashed embeddings, dual-objective pre-training (next-item
//! sampled softmax with logQ correction plus feedback prediction),
//! impression-aware two-tower fine-tuning and the offline metrics.

pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod embedding;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod optim;
pub mod pipeline;
pub mod sampling;
pub mod tensor;
pub mod world;

pub use autograd::{Gradients, Graph, ParamGroup, ParamId, ParamStore, Segment, Var};
pub use checkpoint::Checkpoint;
pub use config::RunConfig;
pub use data::{Feedback, ImpressionPair, Interaction, UserSequence};
pub use error::{ArgusError, Result};
pub use metrics::MetricsReport;
pub use model::{Model, ModelConfig};
pub use sampling::{CountMinSketch, NegativeBatch};
pub use tensor::{Float, Tensor};
