//! Domain-incremental learning for audio-style classification.
//!
//! A small CNN whose convolution kernels are shared by every domain while
//! batch-norm parameters and classifier heads live in per-domain banks.
//! Domains arrive one at a time; each new bank starts as a copy of the
//! previous one and only the bank is trained, so earlier domains are
//! never disturbed.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod inference;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod strategy;
pub mod tensor;
pub mod trainer;

pub use error::{DilError, Result};
