pub mod attention;
pub mod blocks;
pub mod checkpoint;
pub mod checks;
pub mod conv;
pub mod data;
pub mod density;
pub mod error;
pub mod experiments;
pub mod gradcheck;
pub mod loss;
pub mod model;
pub mod optim;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
