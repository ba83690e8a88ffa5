//! Hierarchical diffusion autoencoder and age-regression baseline.

mod config;
mod hdae;
mod layers;
mod net;
mod train;

pub use config::ModelConfig;
pub use hdae::{brain_pad, AgeNorm, AgeRegressor, Hdae};
pub use train::{evaluate_loss, select, train_age_regressor, train_hdae, TrainConfig};
