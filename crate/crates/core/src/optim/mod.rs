//! Optimizers: the quantized Lion step over the gradient stack, and fp
//! Lion/Adam references operating on plain tensors.

mod lion;
mod reference;

pub use lion::{
    lion_step_observed, lion_step_quantized, LionHyper, LionState, LrSchedule,
};
pub use reference::{
    adam_step_reference, lion_step_reference, AdamHyper, AdamState, FpLionState,
};

pub use crate::tensor::sign;
