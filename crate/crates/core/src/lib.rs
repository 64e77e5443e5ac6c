//! Joint hyperspectral/LiDAR land-cover classification with a linear
//! self-attention fusion network.
//!
//! The crate is split into four layers:
//!
//! * [`tensor`]: dense tensors and a reverse-mode autodiff tape.
//! * [`data`]: raster containers, PCA, patch extraction, splits and a
//!   synthetic scene generator.
//! * [`model`]: the two feature extractors, the attention module and the
//!   decision-fusion head, plus checkpoint I/O.
//! * [`train`]: Adam, the mini-batch loop and accuracy metrics.

pub mod data;
pub mod error;
pub mod model;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
