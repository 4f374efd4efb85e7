#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod aggregate;
pub mod config;
pub mod dataset;
pub mod delta;
pub mod error;
pub mod fusion;
pub mod laplace;
pub mod linalg;
pub mod metrics;
pub mod network;
pub mod pipeline;
pub mod plot;
pub mod rng;

pub use error::{Error, Result};
