//! Online gradient approximations for feed-forward spiking networks.

pub mod data;
pub mod error;
pub mod exact;
pub mod grad;
pub mod online;
pub mod snn;
pub mod train;

pub use error::{Error, Result};
pub use grad::{Algorithm, GradientRecord, OnlineGradient, ResetMode};
pub use snn::{LifParams, Network, SpikeRaster};
