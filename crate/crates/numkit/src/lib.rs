//! Minimal dense-numeric kernel.
//!
//! Row-major tensors, fully-connected / 2D convolution / transposed convolution
//! layers with hand-derived backward passes, an Adam optimizer, a counter-based
//! seeded RNG and a central finite-difference gradient checker.
//!
//! Every kernel is generic over [`Scalar`] so that the same layer code runs in
//! `f32` for training and in `f64` for gradient verification.

pub mod adam;
pub mod conv;
pub mod error;
pub mod gemm;
pub mod gradcheck;
pub mod layer;
pub mod linear;
pub mod rng;
pub mod scalar;
pub mod seq;
pub mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState, Optimizer};
pub use conv::{
    conv2d_backward, conv2d_forward, conv2d_output_size, conv_transpose2d_backward,
    conv_transpose2d_forward, conv_transpose2d_output_size, ConvGeometry,
};
pub use error::{NumError, Result};
pub use gradcheck::{check_layer, grad_check, relative_error, BlockReport, GradCheckConfig, GradCheckReport, ParamBlock};
pub use layer::{Init, LayerParams, Parameterized};
pub use linear::{linear_backward, linear_forward};
pub use rng::Rng;
pub use scalar::Scalar;
pub use seq::{Layer, Sequential};
pub use tensor::Tensor;
