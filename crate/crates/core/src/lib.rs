pub mod ambiguity;
pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod losses;
pub mod nn;
pub mod optim;
pub mod tensor;
pub mod train;

pub use autodiff::{backward, Gradients, NormKind, Tape, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
