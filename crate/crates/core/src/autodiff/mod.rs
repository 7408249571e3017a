//! Reverse-mode differentiation over real tensors. Complex fields travel as
//! two-channel tensors (real plane, imaginary plane).
//!
//! A [`Tape`] records primitive applications in execution order; `backward`
//! walks them in strict reverse order. Nodes that depend only on constants
//! are skipped during the reverse sweep.

mod gradcheck;
mod ops;
mod tape;

pub use gradcheck::{grad_check, GradCheckReport};
pub use tape::{CgRecord, Gradients, Tape, Var};
