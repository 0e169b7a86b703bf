pub mod autodiff;
pub mod data;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod models;
pub mod ssl_loss;
pub mod tensor;
pub mod tiling;

pub use error::{Error, Result};
pub use tensor::Tensor;
