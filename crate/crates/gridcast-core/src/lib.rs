//! Spatio-temporal grid forecasting engine.
//!
//! Forecasts the next three frames of a city "frame movie" (T frames of
//! H x W x C intensities, one frame per fixed interval) from a short
//! per-pixel history plus learnable calendar/location bias tables. The
//! crate is `no_std` + `alloc`: it holds the tensors, the reverse-mode
//! gradient tape, the models, the training loop, the reference baselines,
//! and the HyperBand search. File formats, CSV reports, and the CLI live
//! in the companion `gridcast` crate.

#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod baselines;
pub mod data;
pub mod error;
pub mod hypertune;
pub mod models;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::Error;
pub use tensor::Tensor;

/// Crate-wide result alias.
pub type Result<T> = core::result::Result<T, Error>;
