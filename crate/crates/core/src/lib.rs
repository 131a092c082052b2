pub mod augment;
pub mod checkpoint;
pub mod data;
pub mod ensemble;
pub mod error;
pub mod image_io;
pub mod metrics;
pub mod models;
pub mod optim;
pub mod rng;
pub mod screen;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
