//! Speech enhancement in the latent space of a trainable toy neural audio codec.

pub mod audio;
pub mod autodiff;
pub mod error;
pub mod flops;
pub mod mat;
pub mod params;
pub mod cli;
pub mod codec;
pub mod config;
pub mod conformer;
pub mod dataset;
pub mod metrics;
pub mod models;
pub mod optim;
pub mod rvq;
pub mod train;

pub use error::{Error, Result};
