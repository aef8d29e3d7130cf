//! Infrared small-target segmentation with a multi-scale direction-aware
//! network, built on a small CPU tensor library with reverse-mode autodiff.

pub mod data;
pub mod error;
pub mod eval;
pub mod filters;
pub mod gradcheck;
pub mod nn;
pub mod ops;
pub mod params;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{Element, Shape, Tensor};
