//! Triangular-prism recurrent networks for human motion forecasting.
//!
//! A TP-RNN stacks `M` LSTM levels; level `m` keeps `K^(m-1)` hidden states
//! that share one set of weights and take turns updating, so upper levels
//! see the sequence at coarser time scales without running at a lower rate.

// Validation uses `!(x > 0.0)` so that NaN is rejected along with bad values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod arch;
pub mod error;
pub mod eval;
pub mod kvconfig;
pub mod layers;
pub mod metrics;
pub mod numcore;
pub mod parallel;
pub mod posedata;
pub mod train;

#[cfg(test)]
#[path = "../tests/common/oracle.rs"]
mod oracle;

pub use error::{Error, Result};
