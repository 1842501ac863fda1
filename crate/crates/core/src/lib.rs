//! Prompt-based relation classification with label prompt tokens, built on
//! a small define-by-run autodiff engine.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the precision.

pub mod analysis;
pub mod autodiff;
pub mod checkpoint;
pub mod corpus;
pub mod encoder;
pub mod metrics;
pub mod model;
pub mod objective;
pub mod optim;
pub mod params;
pub mod scalar;
pub mod template;
pub mod trainer;
pub mod vocab;

pub use autodiff::{Graph, Tensor, Var};
pub use model::LabelPromptModel;
pub use params::ParamStore;
pub use scalar::Scalar;

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type Graph64 = Graph<f64>;
pub type Graph32 = Graph<f32>;
pub type Model64 = LabelPromptModel<f64>;
pub type Model32 = LabelPromptModel<f32>;
pub type ParamStore64 = ParamStore<f64>;
pub type ParamStore32 = ParamStore<f32>;
