pub mod analysis;
pub mod error;
pub mod formats;
pub mod linalg;
pub mod model_zoo;
pub mod quantizer;
pub mod search;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
