//! Core library for a fine-grained damaged-vs-normal sign detection toolkit:
//! a taped reverse-mode tensor engine, the mutual feature level loss, a
//! miniature three-head detector with standard and slim neck variants, a
//! procedural dataset generator, detection metrics, a deterministic trainer
//! and level-wise attention heat maps.

pub mod boxes;
pub mod detector;
pub mod error;
pub mod mfl;
pub mod tensor;

pub use boxes::{Detection, Rect, TargetBox};
pub use error::{Error, Result};
pub use tensor::{gradcheck, Graph, LeafSpec, Real, Tensor};
