//! Light-field spatial super-resolution.
//!
//! The pipeline has two stages. A coarse network super-resolves each
//! sub-aperture image (SAI) on its own, borrowing detail from a selected set
//! of auxiliary views through a shared pairwise embedding. A refinement
//! network then runs alternating spatial and angular convolutions over the
//! whole coarse light field to restore cross-view consistency.
//!
//! Module map:
//!
//! - [`autodiff`]: dense `f32` tensors and a reverse-mode tape.
//! - [`lightfield`]: the 4D container, EPI slicing, parallax checks, file I/O.
//! - [`imaging`]: bicubic degradation, color conversion and quality metrics.
//! - [`coarse`]: the per-view coarse super-resolution network.
//! - [`selectors`]: the learned SAI selector and the disparity patch selector.
//! - [`refine`]: spatial-angular refinement and the EPI-gradient loss.
//! - [`train`]: sampling, Adam, schedules and checkpoints.
//! - [`pipeline`]: inference on light fields as stored on disk.

pub mod autodiff;
pub mod coarse;
mod error;
pub mod imaging;
pub mod lightfield;
pub mod nn;
pub mod pipeline;
pub mod refine;
pub mod selectors;
pub mod train;

pub use error::{Error, Result};
