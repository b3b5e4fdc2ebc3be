//! Gather-excite context operators for convolutional networks, together with
//! the machinery to build, count, train and analyse networks that use them.

pub mod analysis;
pub mod autograd;
pub mod cost;
pub mod data;
pub mod error;
pub mod ge;
pub mod gradcheck;
pub mod kernels;
mod linalg;
pub mod nn;
pub mod optim;
pub mod param;
pub mod tensor;
pub mod train;
pub mod zoo;

pub use autograd::{Tape, Var};
pub use error::{Error, Result};
pub use tensor::{Real, Shape, Tensor};
