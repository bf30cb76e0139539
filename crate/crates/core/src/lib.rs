//! Online pseudo-labeling and adaptation under simultaneous domain and
//! category shift, with a streaming per-class Gaussian mixture as the only
//! cross-batch memory.
//!
//! The numeric core is generic over [`Real`] (`f32` or `f64`); the aliases
//! below fix the scalar for the common cases. Run orchestration in [`run`]
//! works in `f64`.

pub mod error;
pub mod gmm;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod ood;
pub mod run;
pub mod scalar;
pub mod simulator;

pub use error::{Error, Result};
pub use scalar::Real;

pub type SymMatF64 = linalg::SymMat<f64>;
pub type SymMatF32 = linalg::SymMat<f32>;
pub type GmmStateF64 = gmm::GmmState<f64>;
pub type GmmStateF32 = gmm::GmmState<f32>;
pub type ThresholdStateF64 = ood::ThresholdState<f64>;
pub type ThresholdStateF32 = ood::ThresholdState<f32>;
pub type ToyModelF64 = model::ToyModel<f64>;
pub type ToyModelF32 = model::ToyModel<f32>;
