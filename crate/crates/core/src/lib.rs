//! Domain adaptation for small MLP classifiers: a reverse-mode autodiff
//! tape, a trunk with category and domain heads, confusion and soft-label
//! losses, alternating training, synthetic shifted data, and evaluation.

// `!(x > 0.0)` rejects NaN along with non-positive values
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod data;
pub mod error;
pub mod eval;
pub mod exec;
pub mod experiment;
pub mod losses;
pub mod network;
pub mod trainer;

pub use error::{Error, Result};
pub use exec::Exec;
