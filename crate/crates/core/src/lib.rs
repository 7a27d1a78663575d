//! Scene point clouds to instruction-tuned answers: ingestion, perceiver
//! features, templated instruction data, a low-rank adapted micro language
//! model, and the evaluation metrics.

pub mod autodiff;
pub mod error;
pub mod instructions;
pub mod lm;
pub mod metrics;
pub mod nn;
pub mod perceiver;
pub mod pipeline;
pub mod prompt;
pub mod scalar;
pub mod scene;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Matrix32 = tensor::Matrix<f32>;
pub type Matrix64 = tensor::Matrix<f64>;
pub type ParamStore32 = autodiff::ParamStore<f32>;
pub type ParamStore64 = autodiff::ParamStore<f64>;
pub type Tape32 = autodiff::Tape<f32>;
pub type Tape64 = autodiff::Tape<f64>;
pub type Model32 = lm::Model<f32>;
pub type Model64 = lm::Model<f64>;
pub type Trainer32 = lm::Trainer<f32>;
pub type Trainer64 = lm::Trainer<f64>;
