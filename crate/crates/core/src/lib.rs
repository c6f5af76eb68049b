//! Few-shot semantic segmentation with self-contrastive background
//! prototypes.
//!
//! A support prototype is compared against query features by a small
//! convolutional module; during training the same module additionally
//! compares query features against background prototypes clustered from
//! the query itself.

pub mod alignment;
pub mod episodes;
pub mod error;
pub mod eval;
pub mod model;
pub mod protogen;
pub mod tensorcore;

pub use error::{Error, Result};
