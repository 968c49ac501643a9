//! Dense `f64` tensors with reverse-mode autodiff.

mod gradcheck;
mod param;
mod tape;

pub use gradcheck::{finite_diff_check, relative_error, GradCheckOptions, GradCheckReport, ParamCheck, REL_ERROR_FLOOR};
pub use param::{Gradients, ParamId, ParamStore, Parameter};
pub use tape::{Backward, Mutation, Tape, Var, GELU_A, GELU_C, MASK_BIAS};
