pub mod error;
pub mod fas;
pub mod fusion;
pub mod io;
pub mod metrics;
pub mod model;
pub mod net;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
