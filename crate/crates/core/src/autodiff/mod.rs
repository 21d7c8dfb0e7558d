//! Minimal reverse-mode differentiation over dense `N×C×H×W` tensors.
//!
//! A [`Tape`] owns every value computed during a forward pass. Each op checks that
//! its output is finite and records its inputs when any of them needs a gradient;
//! [`Tape::backward`] then sweeps the tape once in reverse.

mod direct;
mod gradcheck;
mod kernels;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_coords, relative_error};
pub use tape::{Activation, Gradients, ReduceKind, Tape, Var, DSNT_MASS_TOL, LEAKY_SLOPE};
pub use tensor::{Real, Tensor};
