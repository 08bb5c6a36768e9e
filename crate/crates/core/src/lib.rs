//! Video frame prediction with transformational latent states.
//!
//! An encoder factorizes each frame into a content state `s` and a
//! transformational latent `d`. A ConvLSTM stack accumulates the transformation
//! estimate `g` from the history of `[d, s]`, a small feed-forward operator
//! applies `g` to the current state to produce the next one, and a decoder
//! renders predicted states back into frames. Weighted temporal residual
//! connections carry decoder activations forward from one prediction step to
//! the next.

pub mod cli;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod par;
pub mod tensor;
pub mod training;

pub use error::{Result, TensorError};
pub use tensor::{Element, Graph, Tensor, Var};
