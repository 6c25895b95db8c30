pub mod error;
pub mod gradsuite;
pub mod losses;
pub mod model;
pub mod preprocess;
pub mod signal;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{no_grad, Tensor};
