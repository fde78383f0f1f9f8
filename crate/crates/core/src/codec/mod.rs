//! Frame coding, the bitstream container, weights and training.

pub mod config;
pub mod frame;
pub mod model;
pub mod stream;
pub mod weights;
pub mod train;
pub mod eval;
