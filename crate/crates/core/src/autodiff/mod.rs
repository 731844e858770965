//! Dense tensor operations with reverse-mode differentiation.

mod kernels;
mod tape;

pub use tape::{log_softmax_row, Mode, Tape, Var};
