pub mod attractor;
pub mod autodiff;
mod bytes;
pub mod codebook;
pub mod cogmap;
pub mod config;
pub mod error;
pub mod exact;
pub mod gridworld;
pub mod model;
pub mod pnm;
pub mod quantizer;
pub mod train;

pub use error::{GcqError, Result};
