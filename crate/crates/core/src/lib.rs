//! Recurrent sequence models for long, overlapping time series.
//!
//! The crate trains a GRU on windowed sequences cut from long series and
//! offers several ways to initialize each window's hidden state, from plain
//! zero-init minibatches to message propagation through a persistent
//! state-map.

pub mod data;
pub mod error;
pub mod evalmetrics;
pub mod experiment;
pub mod inference;
pub mod kernel;
pub mod memory;
pub mod model;
pub mod strategies;

pub use error::{Error, Result};
