//! Pronunciation assessment regressor trained with a phonemic contrast
//! ordinal (PCO) loss.
//!
//! Everything numeric is generic over [`scalar::Scalar`] (`f32` or `f64`);
//! the aliases below fix the precision for the common case.

pub mod autodiff;
pub mod dataset;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod scalar;
pub mod trainer;

pub use scalar::Scalar;

pub type Tensor64 = autodiff::Tensor<f64>;
pub type Tensor32 = autodiff::Tensor<f32>;
pub type Tape64 = autodiff::Tape<f64>;
pub type Tape32 = autodiff::Tape<f32>;
pub type ModelParams64 = model::ModelParams<f64>;
pub type ModelParams32 = model::ModelParams<f32>;
pub type SeedRun64 = trainer::SeedRun<f64>;
pub type SeedRun32 = trainer::SeedRun<f32>;
