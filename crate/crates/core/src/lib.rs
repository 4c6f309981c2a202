pub mod cpm;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod metric;
pub mod model;
pub mod motion;
pub mod nn;
pub mod objective;
pub mod runner;
pub mod tensor;

pub use error::{Error, ErrorClass, Result};
pub use tensor::{Precision, Tape, Tensor, Var};
