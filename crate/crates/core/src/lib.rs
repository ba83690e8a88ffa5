//! Normative diffusion autoencoder pipeline on synthetic brain phantoms.

pub mod checkpoint;
pub mod error;
pub mod io;
pub mod model;
pub mod phantom;
pub mod pipeline;
pub mod sampler;
pub mod schedule;
pub mod scoring;

pub use error::{Error, Result};
