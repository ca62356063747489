//! Reverse-mode automatic differentiation over dense `f64` tensors, plus the
//! neural building blocks (MLP, convolution, attention, positional encoding,
//! Adam) used by the reconstruction pipeline.

pub mod adam;
pub mod checkpoint;
pub mod error;
pub mod gradcheck;
mod kernels;
pub mod nn;
pub mod posenc;
pub mod tape;
pub mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use checkpoint::Checkpoint;
pub use error::{AutodiffError, Result};
pub use kernels::rodrigues;
pub use nn::{mlp_forward, Activation, Conv2dParams, ConvVars, Linear, MlpParams, MlpVars, Module};
pub use posenc::{positional_encode, PosEncConfig};
pub use tape::{Tape, Unary, Var};
pub use tensor::Tensor;
