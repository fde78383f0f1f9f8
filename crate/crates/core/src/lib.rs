//! Learned low-latency video codec with flexible rate.

pub mod autodiff;
pub mod backbone;
pub mod codec;
pub mod codelayer;
pub mod error;
pub mod gauss;
pub mod kernels;
pub mod motion;
pub mod norm;
pub mod optim;
pub mod params;
pub mod rateflex;
pub mod tensor;
pub mod tools;

pub use error::{Error, Result};
pub use tensor::Tensor;
