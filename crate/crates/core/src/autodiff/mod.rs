//! Reverse-mode automatic differentiation on a flat tape.
//!
//! [`Tensor`] is a dense row-major `f64` array. [`Tape`] records operations
//! as they are evaluated and replays them backwards from a scalar loss;
//! [`grad_check`] validates any tape-built scalar function against central
//! finite differences.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{fnv1a, grad_check, run_op_suite, GradCheckReport, SuiteEntry, SuiteReport};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
