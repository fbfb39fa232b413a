//! Event-conditioned forecasting with a gated text/time-series fusion model.

pub mod alignment;
pub mod autograd;
pub mod checkpoint;
pub mod checks;
pub mod config;
pub mod datagen;
pub mod decoder;
pub mod encoders;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod params;
pub mod pipeline;
pub mod report;
pub mod tensor;
pub mod trainer;

pub use autograd::{Gradients, Tape, Var};
pub use error::{Error, ErrorClass, Result};
pub use params::{ParamGroup, ParamId, ParamStore};
pub use tensor::Tensor;
