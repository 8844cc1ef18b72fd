//! Markovian lift of stochastic delay equations on E = L^r(0,1).

// `!(x > 0.0)` is used on purpose so that NaN fails validation
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod cli;
pub mod delay_operators;
pub mod error;
pub mod field;
pub mod noise;
pub mod numerics;
pub mod scenarios;
pub mod segments;
pub mod semigroup;
pub mod solvers;

pub use error::{Error, Result};
