//! Open-vocabulary 3D object affordance grounding.
//!
//! A point cloud and an interaction image are encoded, enriched with
//! knowledge reasoned out of a multimodal LLM, fused, and decoded into a
//! per-point affordance heatmap.

pub mod autograd;
pub mod checkpoint;
pub mod backbones;
pub mod cmafm;
pub mod dataset;
pub mod decoder;
pub mod error;
pub mod knowledge;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod mhacot;
pub mod mllm;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod render;

pub use error::{Error, Result};
