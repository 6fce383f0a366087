//! Vision transformers trained with positional-label self-supervision.
//!
//! A small f64 tensor library with reverse-mode differentiation sits under
//! a ViT encoder, absolute and relative position-prediction heads, masked
//! autoencoder pretraining and the training loops that combine them.

pub mod augment;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod graph;
mod kernels;
pub mod mae;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod position;
pub mod rng;
pub mod tensor;
pub mod train;

pub use config::{Augmentation, ExperimentConfig, HeadMode, ModelConfig, TrainConfig};
pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use params::{Grads, ParamSet};
pub use tensor::Tensor;
