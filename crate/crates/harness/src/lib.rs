// `!(x > 0.0)` style checks are used on purpose so NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod error;
pub mod experiment;
pub mod io;
pub mod phantom;

pub use error::{HarnessError, Result};
pub use smug_core::metrics::{psnr, ssim};
