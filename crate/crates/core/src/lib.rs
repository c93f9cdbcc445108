//! Censored-selection bivariate distribution regression.

// `!(a < b)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments)]

pub mod error;
pub mod functionals;
pub mod gauss2d;
pub mod lgr;
pub mod likelihood;
pub mod estimator;
pub mod inference;
pub mod simulate;

pub use error::{CdrError, Cell, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
