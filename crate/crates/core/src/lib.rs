//! Sperm-head morphology pipeline: classical pseudo-mask generation, student-teacher
//! spatial pretraining on a small convolutional network, and soft-label tuning.

// `!(x > 0.0)` style checks are deliberate: they reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod data;
pub mod distill;
pub mod error;
pub mod hpm;
pub mod imgcore;
pub mod losses;
pub mod seed;
pub mod tinynn;
pub mod tune;

pub use error::{Error, Result};
