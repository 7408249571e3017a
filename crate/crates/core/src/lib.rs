// `!(x > 0.0)` style checks are used on purpose so NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod checkpoint;
pub mod error;
pub mod fourier;
pub mod metrics;
pub mod models;
pub mod reconstructors;
pub mod rng;
pub mod robustness;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
