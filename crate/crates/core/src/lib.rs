// Negated comparisons reject NaN on purpose; index loops mirror the maths.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod cache;
pub mod data;
pub mod error;
pub mod harness;
pub mod losses;
pub mod model;
pub mod offload;
pub mod predictor;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
