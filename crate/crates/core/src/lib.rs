//! Quantized fine-tuning engine.
//!
//! All model states (weights, gradients and optimizer momentum) live as
//! low-bit integers with per-channel affine parameters and are dequantized on
//! the fly for computation:
//!
//! * [`quant`] holds the uniform quantizer for gradients and momentum and the
//!   dense-and-sparse quantizer for weights.
//! * [`network`] is a stack of bias-free linear layers whose weights exist
//!   only in quantized form between steps.
//! * [`gradflow`] runs the manual backward pass that pushes quantized layer
//!   gradients onto a global stack.
//! * [`optim`] pops that stack in layer order for the quantized Lion step,
//!   next to fp32 Lion and Adam references.
//! * [`profiler`] accounts model-state memory analytically and by counting
//!   the bytes the engine actually holds.
//! * [`trainer`] wires it together: config, data, training loop,
//!   checkpoints and comparison runs.

pub mod error;
pub mod gradflow;
pub mod network;
pub mod optim;
pub mod profiler;
pub mod quant;
pub mod tensor;
pub mod trainer;

pub use error::{QftError, Result};
pub use tensor::{Real, Tensor};
