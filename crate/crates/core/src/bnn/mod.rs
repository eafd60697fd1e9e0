//! Mean-field variational Bayesian neural network.
//!
//! Every hidden weight and bias has an independent Gaussian posterior
//! `N(mu, softplus(rho)²)` against a standard-normal prior. A forward pass
//! realises the weights as `mu + sigma ⊙ eps` and ends in a deterministic
//! two-unit head read as the mean and (softplus) SD of a Gaussian over the
//! standardised label. Training minimises the negative ELBO with Adam.

pub mod io;
pub mod model;
pub mod train;
pub mod variational;

pub use io::{ModelDocument, MODEL_FORMAT};
pub use model::{
    elbo_loss, elbo_loss_weighted, gaussian_nll, gradients, sample_forward, Batch, BnnModel,
    Estimator, Gradients, Init, LayerNoise, ParamBlock, ParamKind, Prediction, TargetScaling,
    VariationalDenseLayer, WeightNoise, SD_FLOOR,
};
pub use train::{train, KlWeightMode, TrainConfig, DEFAULT_KL_FACTOR};
pub use variational::{kl_gaussian, softplus, softplus_grad, GaussianVariational};
