pub mod data;
pub mod error;
pub mod gradcheck;
pub mod model;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Real, Tape, Tensor, Var};
