//! Hierarchical multi-scale residual tokenization and next-scale
//! autoregressive super-resolution on top of [`hvsr_tensor`].

pub mod autoencoder;
mod bytes;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod image;
pub mod metrics;
pub mod nn;
pub mod quantizer;
pub mod synth;
pub mod var;

pub use error::{Error, Result};
