pub mod attacks;
pub mod bounds;
pub mod data;
pub mod error;
pub mod io;
pub mod losses;
pub mod models;
pub mod pipeline;
pub mod sam;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
