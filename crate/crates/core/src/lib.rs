//! Flow-matching data assimilation on toy chaotic dynamics.
//!
//! A background forecast is transported toward the truth by integrating a
//! learned, observation-conditioned velocity field with forward Euler.
//! Sparse point observations enter the network through a SetConv lift that
//! produces a gridded estimate and a density field.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod dynamics;
pub mod error;
pub mod flow;
pub mod grid;
pub mod harness;
pub mod io;
pub mod obs;
pub mod optim;
pub mod setconv;
pub mod train;

pub use error::{Error, Result};
pub use grid::{GridState, VariableStats};
