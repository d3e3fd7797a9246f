//! Generalized relation modeling for one-stream Transformer tracking.
//!
//! The crate provides a small reverse-mode tensor engine ([`autograd`]) and,
//! on top of it, patch embedding, the tri-category masked-attention encoder
//! with adaptive token division ([`relation`]), and the center/offset/size
//! prediction head with its training losses ([`head`]).

pub mod autograd;
pub mod embedding;
pub mod error;
pub mod gradcheck;
pub mod head;
pub mod model;
pub mod nn;
pub mod relation;
pub mod tensor;

pub use autograd::{Tape, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
