//! Denoising density estimators (scalar energy networks whose input gradient is fit to
//! Gaussian noise) and one-step generators trained against them by reverse-KL descent.

pub mod checkpoint;
pub mod cli;
pub mod datasets;
pub mod dde;
pub mod diffengine;
pub mod error;
pub mod evaluation;
pub mod generator;
pub mod network;
pub mod optim;
pub mod rng;
pub mod samplers;

pub use error::{Error, Result};
