//! Deterministic differentiable tensor core.

mod gradcheck;
pub(crate) mod kernels;
pub mod nn;
mod real;
mod rng;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_screened, relative_error, GradCheckReport, KINK_TOLERANCE};
pub use real::Real;
pub use rng::{Rng, RngState};
pub use tape::{BinaryKind, Gradients, ReduceKind, Tape, UnaryKind, Var, DIV_GUARD};
pub use tensor::Tensor;
