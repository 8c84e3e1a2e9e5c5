//! Reverse-mode automatic differentiation over a fixed op vocabulary.

mod gradcheck;
pub(crate) mod kernels;
mod tape;

pub use gradcheck::{gradcheck, gradcheck_many, gradcheck_sampled, relative_error};
pub use tape::{Precision, Tape, Var};
