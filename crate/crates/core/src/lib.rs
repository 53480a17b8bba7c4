// NaN must fail validation, so `!(x > 0.0)` is the intended form throughout.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod data;
pub mod error;
pub mod losses;
pub mod models;
pub mod par;
pub mod retrieval;
pub mod rng;
pub mod training;
pub mod verify;

pub use error::{Error, Result};
