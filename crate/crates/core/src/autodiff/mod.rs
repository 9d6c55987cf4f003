//! Dense tensors with a reverse-mode differentiation tape.
//!
//! Tensors are row-major `f32` buffers. A [`Tape`] owns every value produced
//! during one forward pass and replays the recorded ops in reverse on
//! [`Tape::backward`]. Handles into the tape are plain [`Var`] indices, so a
//! recorded op can only reference nodes created before it.

pub mod gradcheck;
mod kernels;
mod tape;
mod tensor;

pub use kernels::{pixel_shuffle_tensor, pixel_unshuffle_tensor, pool_windows};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
