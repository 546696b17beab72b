//! Reverse-mode differentiation, parameter storage, Adam and checkpoints.

mod adam;
pub mod checkpoint;
mod params;
mod tape;
mod tensor;

pub use adam::{adam_step, clip_global_norm, AdamConfig, AdamState};
pub use params::{BoundParams, ParamStore};
pub use tape::{sigmoid, Gradients, Tape, Var, EXP_CLAMP, PROB_EPS};
pub use tensor::Tensor;
