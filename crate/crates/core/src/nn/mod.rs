//! Dense tensors, reverse-mode autodiff, Adam, and checkpoint archives.

pub mod adam;
pub mod checkpoint;
pub mod layers;
pub mod params;
pub mod tape;
pub mod tensor;

pub use adam::{adam_step, AdamConfig};
pub use checkpoint::{stored_dtype, Archive};
pub use params::{Param, ParamStore};
pub use tape::{Gradients, Mask, Tape, Var};
pub use tensor::{matmul_values, Real, Tensor};
