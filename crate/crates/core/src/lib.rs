//! Battery end-of-life prediction with a mean-field variational Bayesian
//! neural network, early-cycle feature extraction, a synthetic cell
//! generator and point-estimate baselines.

pub mod baselines;
pub mod bnn;
pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod features;
pub mod nn;
pub mod optim;
pub mod predictor;
pub mod seed;
pub mod synthetic;
pub mod training;

pub use error::{Error, Result};
