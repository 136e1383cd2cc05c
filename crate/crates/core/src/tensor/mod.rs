//! Dense tensors, a reverse-mode autodiff tape, and the Adam optimizer.

mod adam;
mod array;
pub mod checkpoint;
mod conv;
pub mod gradcheck;
mod lstm;
mod params;
mod resize;
mod scalar;
mod tape;

pub use adam::{adam_step, Adam, AdamConfig, AdamState};
pub use array::Tensor;
pub use conv::ConvGeom;
pub use lstm::{lstm_step, LstmParams};
pub use params::{Bound, ParamStore};
pub use resize::bilinear;
pub use scalar::{gemm, Layout, Scalar};
pub use tape::{BatchStats, Binary, Tape, Unary, Var, LOG_EPS};
