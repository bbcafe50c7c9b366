//! Dynamic prompting of a miniature text-conditioned UNet for panoptic
//! narrative grounding.

pub mod ablate;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod decoder;
pub mod eipa;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod harness;
pub mod heads;
pub mod metrics;
pub mod mlma;
pub mod model;
pub mod nn;
pub mod textenc;
pub mod train;
pub mod unet;
pub mod visualize;

pub use error::{Error, Result};
