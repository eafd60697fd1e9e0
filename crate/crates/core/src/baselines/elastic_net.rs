use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_TOL: f64 = 1e-8;
pub const DEFAULT_MAX_ITER: usize = 100_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElasticNetModel {
    pub coefficients: Vec<f64>,
    pub intercept: f64,
    pub lambda: f64,
    pub alpha: f64,
}

impl ElasticNetModel {
    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.coefficients.len() {
            return Err(Error::DimensionMismatch {
                expected: self.coefficients.len(),
                actual: x.len(),
            });
        }
        Ok(self.intercept + self.coefficients.iter().zip(x).map(|(b, v)| b * v).sum::<f64>())
    }

    /// `(1/2n)‖y − Xβ − b‖² + λ(α‖β‖₁ + (1−α)/2 ‖β‖²)`.
    pub fn objective(&self, x: &[Vec<f64>], y: &[f64]) -> Result<f64> {
        let mut rss = 0.0;
        for (row, &t) in x.iter().zip(y) {
            let r = t - self.predict(row)?;
            rss += r * r;
        }
        let l1: f64 = self.coefficients.iter().map(|b| b.abs()).sum();
        let l2: f64 = self.coefficients.iter().map(|b| b * b).sum();
        Ok(rss / (2.0 * y.len() as f64) + self.lambda * (self.alpha * l1 + 0.5 * (1.0 - self.alpha) * l2))
    }
}

pub fn soft_threshold(z: f64, gamma: f64) -> f64 {
    if z > gamma {
        z - gamma
    } else if z < -gamma {
        z + gamma
    } else {
        0.0
    }
}

pub fn fit_elastic_net(x: &[Vec<f64>], y: &[f64], lambda: f64, alpha: f64, tol: f64, max_iter: usize) -> Result<ElasticNetModel> {
    coordinate_descent(x, y, lambda, alpha, tol, max_iter, |_| {})
}

/// As [`fit_elastic_net`], also returning the objective after every sweep.
pub fn fit_elastic_net_traced(
    x: &[Vec<f64>],
    y: &[f64],
    lambda: f64,
    alpha: f64,
    tol: f64,
    max_iter: usize,
) -> Result<(ElasticNetModel, Vec<f64>)> {
    let mut trace = Vec::new();
    let model = coordinate_descent(x, y, lambda, alpha, tol, max_iter, |m| {
        trace.push(m.objective(x, y).unwrap_or(f64::NAN))
    })?;
    Ok((model, trace))
}

fn coordinate_descent(
    x: &[Vec<f64>],
    y: &[f64],
    lambda: f64,
    alpha: f64,
    tol: f64,
    max_iter: usize,
    mut on_sweep: impl FnMut(&ElasticNetModel),
) -> Result<ElasticNetModel> {
    if x.is_empty() || x.len() != y.len() {
        return Err(Error::DimensionMismatch {
            expected: x.len(),
            actual: y.len(),
        });
    }
    if !(lambda >= 0.0 && lambda.is_finite()) || !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!(
            "need lambda >= 0 and alpha in [0, 1], got {lambda}, {alpha}"
        )));
    }
    let n = y.len();
    let p = x[0].len();
    if let Some(row) = x.iter().find(|r| r.len() != p) {
        return Err(Error::DimensionMismatch {
            expected: p,
            actual: row.len(),
        });
    }
    let inv_n = 1.0 / n as f64;
    let col_sq: Vec<f64> = (0..p).map(|j| x.iter().map(|r| r[j] * r[j]).sum::<f64>() * inv_n).collect();
    let l1 = lambda * alpha;
    let l2 = lambda * (1.0 - alpha);

    let mut model = ElasticNetModel {
        coefficients: vec![0.0; p],
        intercept: y.iter().sum::<f64>() * inv_n,
        lambda,
        alpha,
    };
    let mut resid: Vec<f64> = y.iter().map(|t| t - model.intercept).collect();
    let mut delta = f64::INFINITY;
    for _ in 0..max_iter {
        delta = 0.0;
        for j in 0..p {
            let old = model.coefficients[j];
            let denom = col_sq[j] + l2;
            let new = if denom > 0.0 {
                let rho: f64 = x.iter().zip(&resid).map(|(r, e)| r[j] * (e + r[j] * old)).sum::<f64>() * inv_n;
                soft_threshold(rho, l1) / denom
            } else {
                0.0
            };
            if new != old {
                for (r, e) in x.iter().zip(resid.iter_mut()) {
                    *e -= r[j] * (new - old);
                }
                model.coefficients[j] = new;
                delta = delta.max((new - old).abs());
            }
        }
        let shift = resid.iter().sum::<f64>() * inv_n;
        model.intercept += shift;
        resid.iter_mut().for_each(|e| *e -= shift);
        delta = delta.max(shift.abs());
        on_sweep(&model);
        if delta < tol {
            return Ok(model);
        }
    }
    Err(Error::NotConverged {
        iterations: max_iter,
        last_delta: delta,
    })
}
