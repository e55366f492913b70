//! Grid crowd-flow forecasting with attentive ConvLSTMs.
//!
//! The crate implements a from-scratch spatial-temporal forecasting engine:
//! a small reverse-mode tensor library, the attentive crowd flow machine
//! (two progressive ConvLSTMs joined by a learned spatial attention map),
//! the full sequential-periodic prediction network with temporally-varying
//! fusion, a flow-grid data model with a synthetic generator, and an
//! Adam training / RMSE evaluation harness.

pub mod error;
pub mod fd;
pub mod tensor;

pub mod tape;

pub mod nn;

pub mod acfm;
pub mod spn;

pub mod data;

pub mod parallel;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
