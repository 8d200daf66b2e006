//! Feed-forward multi-view reconstruction: an alternating-attention trunk
//! with register tokens, depth and camera heads, supervised and
//! self-distillation training on synthetic scenes, evaluation metrics and a
//! sequence quality gate.

pub mod aggregator;
pub mod autograd;
pub mod distill;
pub mod engine;
pub mod error;
pub mod geometry;
pub mod heads;
pub mod io;
pub mod linalg;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod params;
pub mod quality;
pub mod scalar;
pub mod synthetic;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Model32 = model::Model<f32>;
pub type Model64 = model::Model<f64>;
pub type Bundle32 = geometry::SceneBundle<f32>;
pub type Bundle64 = geometry::SceneBundle<f64>;
pub type Camera32 = geometry::Camera<f32>;
pub type Camera64 = geometry::Camera<f64>;
pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
