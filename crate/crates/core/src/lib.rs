pub mod calibration;
pub mod cli;
pub mod dataset;
pub mod eptq;
pub mod error;
pub mod fixtures;
pub mod forward;
pub mod graph;
pub mod hessian;
pub mod model_io;
pub mod optim;
mod parallel;
pub mod pipeline;
pub mod quant;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
