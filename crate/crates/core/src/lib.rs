//! Multi-task product-ranking model with an engagement-funnel pipeline.
//!
//! The crate is organized around the stages of the model: deep & wide
//! feature generation, two-stage mixture-of-experts extraction, per-task
//! towers with attention transfer, funnel probability transfer, and
//! uncertainty-weighted training — plus a synthetic funnel dataset
//! generator, ranking metrics with brute-force oracles, and checkpointing.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod extraction;
pub mod features;
pub mod heads;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod objective;
pub mod pipeline;
pub mod train;

pub use autodiff::{Graph, Mode, NodeId, Tensor};
pub use config::{ExperimentConfig, ModelConfig, Toggles};
pub use error::{Error, Result};
pub use model::MlprModel;
pub use nn::ParamStore;
