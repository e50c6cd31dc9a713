//! Dense tensors and a reverse-mode tape covering the op set of the fusion head.

mod encoder;
pub mod gradcheck;
mod tape;
mod tensor;

pub use encoder::{transformer_encoder_layer, EncoderVars};
pub use tape::{Gradients, Op, Segment, Tape, Var};
pub use tensor::{Scalar, Tensor};

/// Epsilon used by every layer norm in the crate.
pub const LAYER_NORM_EPS: f64 = 1e-5;
