//! Collaborative-token recommendation on a miniature language model.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the precision for callers that do not need the choice.

pub mod collab;
pub mod config;
pub mod data;
pub mod distill;
pub mod error;
pub mod evalrep;
pub mod fusion;
pub mod minilm;
pub mod params;
pub mod pipeline;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Graph32 = tensor::Graph<f32>;
pub type Graph64 = tensor::Graph<f64>;
pub type MiniLm32 = minilm::MiniLm<f32>;
pub type MiniLm64 = minilm::MiniLm<f64>;
pub type CollabModel32 = collab::CollabModel<f32>;
pub type CollabModel64 = collab::CollabModel<f64>;
pub type FusionModel32 = fusion::FusionModel<f32>;
pub type FusionModel64 = fusion::FusionModel<f64>;
pub type ParamStore32 = params::ParamStore<f32>;
pub type ParamStore64 = params::ParamStore<f64>;
