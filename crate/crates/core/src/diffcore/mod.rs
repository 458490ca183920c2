//! Minimal reverse-mode automatic differentiation.
//!
//! Every forward pass records onto a fresh [`Tape`]; [`Tape::backward`] then
//! sweeps it in reverse. Parameters live in a [`ParamStore`] and are copied
//! onto the tape with [`Tape::param`], so a finished tape never aliases the
//! model.

mod adam;
pub mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamState};
pub use params::{ParamGrads, ParamId, ParamStore, Parameter};
pub use tape::{Gradients, OpKind, Tape, Var};
pub use tensor::Tensor;
