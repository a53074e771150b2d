//! Dense arrays, forward kernels, reverse-mode differentiation and the
//! finite-difference oracle.

mod array;
pub mod fd;
pub mod ops;
pub mod params;
mod tape;

pub use array::Array;
pub use fd::finite_difference_gradient;
pub use ops::{layer_norm, pointwise, Activation};
pub use params::{check_param_gradients, Bound, GradCheckReport, ParamId, ParamSet};
pub use tape::{BackwardFn, Gradients, Tape, Var};
