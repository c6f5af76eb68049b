//! Dense tensors and a reverse-mode tape covering the ops the encoder and
//! comparison module need.

mod kernels;
mod tape;
mod tensor;

pub use tape::{OpRecord, Tape, Var};
pub use tensor::{BinaryMask, FeatureMap, Tensor};
