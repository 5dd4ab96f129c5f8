//! Reverberation-transform trajectory forecasting.

pub mod cli;
pub mod config;
pub mod curves;
pub mod data;
pub mod error;
pub mod io;
pub mod linear;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod reverb;
pub mod social;
pub mod train;
pub mod transforms;

pub use error::{Error, Result};
