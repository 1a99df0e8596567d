//! Visible-spectrum iris recognition toolkit.
// `!(x > 0.0)` is used on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod capture;
pub mod error;
pub mod eval;
pub mod gabor;
pub mod gattu;
pub mod geometry;
pub mod imaging;
pub mod matcher;
pub mod pipeline;
pub mod quality;
pub mod synth;

pub use error::{Error, Result};
