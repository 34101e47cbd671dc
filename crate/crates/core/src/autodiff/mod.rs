//! Dense arrays and reverse-mode automatic differentiation.
//!
//! The nonlinearity is the tanh-approximated GELU. It is smooth everywhere,
//! which keeps finite-difference checks tight (ReLU's kink is not).

mod array;
mod gradcheck;
pub mod kernels;
mod tape;

pub use array::Array;
pub use gradcheck::{finite_difference_gradient, max_relative_error};
pub use tape::{Gradients, Node, Op, Tape, Var};
