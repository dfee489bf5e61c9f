//! Lung-field segmentation on chest radiographs with a configurable U-net,
//! Dice-loss training and Tree-structured Parzen Estimator hyperparameter
//! search.

pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod hpo;
pub mod model;
pub mod nn;
pub mod training;

pub use error::{Error, Result};
