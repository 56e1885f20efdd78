//! Kernel-level energy prediction for neural networks and an energy-aware,
//! policy-gradient architecture search over tabular network spaces.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cost;
pub mod data;
pub mod error;
pub mod fusion;
pub mod graph;
pub mod nas;
pub mod space;
pub mod supernet;

pub use error::{Error, Result};
