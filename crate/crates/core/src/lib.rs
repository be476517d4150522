//! Token-direction dynamics of self-attention under normalization schemes.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod attention;
pub mod dynamics;
pub mod error;
pub mod experiments;
pub mod geometry;
pub mod ode;
pub mod schemes;
pub mod seeds;
pub mod symmetric;

pub use error::{Error, Result};
