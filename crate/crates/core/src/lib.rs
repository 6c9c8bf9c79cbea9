pub mod container;
pub mod data;
pub mod error;
pub mod eval;
pub mod frontend;
pub mod model;
pub mod numerics;
pub mod rng;
pub mod scalar;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor32 = numerics::Tensor<f32>;
pub type Tensor64 = numerics::Tensor<f64>;
pub type AcaNet32 = model::AcaNet<f32>;
pub type AcaNet64 = model::AcaNet<f64>;
pub type FeatureMatrix32 = frontend::FeatureMatrix<f32>;
pub type FeatureMatrix64 = frontend::FeatureMatrix<f64>;
