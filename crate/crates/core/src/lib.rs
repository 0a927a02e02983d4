//! Joint change detection and change captioning for bi-temporal image pairs.

pub mod autograd;
pub mod changelstm;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod predictor;
pub mod render;
pub mod scalar;
pub mod tensor;
pub mod training;

pub use config::{LossMode, RunConfig};
pub use error::{Error, Result};
pub use model::ChangeMinds;
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type ChangeMindsF32 = ChangeMinds<f32>;
pub type ChangeMindsF64 = ChangeMinds<f64>;
pub type TensorF32 = Tensor<f32>;
pub type TensorF64 = Tensor<f64>;
