//! Mean-field Gaussian posteriors and their closed-form pieces.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Prior mean shared by every weight.
pub const PRIOR_MEAN: f64 = 0.0;
/// Prior standard deviation shared by every weight.
pub const PRIOR_SD: f64 = 1.0;

/// `ln(1 + e^x)` without overflow; returns `x` itself above 30.
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Derivative of [`softplus`], the logistic function.
pub fn softplus_grad(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse of [`softplus`] for positive `y`.
pub fn inverse_softplus(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

/// `KL(N(mu, sigma²) ‖ N(0, 1))`.
pub fn kl_gaussian(mu: f64, sigma: f64) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "sigma must be positive, got {sigma}"
        )));
    }
    Ok(kl_unchecked(mu, sigma))
}

#[inline]
pub(crate) fn kl_unchecked(mu: f64, sigma: f64) -> f64 {
    (mu * mu + sigma * sigma - 1.0) / 2.0 - sigma.ln()
}

/// Independent Gaussians `N(mu_i, softplus(rho_i)²)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianVariational {
    pub mu: Vec<f64>,
    pub rho: Vec<f64>,
}

impl GaussianVariational {
    pub fn new(mu: Vec<f64>, rho: Vec<f64>) -> Result<Self> {
        if mu.len() != rho.len() {
            return Err(Error::DimensionMismatch {
                expected: mu.len(),
                actual: rho.len(),
            });
        }
        Ok(Self { mu, rho })
    }

    pub fn len(&self) -> usize {
        self.mu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.is_empty()
    }

    pub fn sigma(&self) -> impl Iterator<Item = f64> + '_ {
        self.rho.iter().map(|&r| softplus(r))
    }

    /// `mu + sigma ⊙ eps`.
    pub fn realize(&self, eps: &[f64]) -> Vec<f64> {
        self.mu
            .iter()
            .zip(self.sigma())
            .zip(eps)
            .map(|((m, s), e)| m + s * e)
            .collect()
    }

    /// Summed KL divergence from the prior.
    pub fn kl(&self) -> f64 {
        self.mu
            .iter()
            .zip(self.sigma())
            .map(|(&m, s)| kl_unchecked(m, s))
            .sum()
    }
}
