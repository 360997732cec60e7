//! Certified (q, eta)-learnability and provably unlearnable examples for
//! small feed-forward classifiers.

// `!(x > 0.0)` style checks are how NaN gets rejected alongside bad values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attacks;
pub mod certify;
pub mod data;
pub mod error;
pub mod io;
pub mod nn;
pub mod par;
pub mod pue;
pub mod rng;
pub mod smoothing;

pub use error::{Error, Result};
