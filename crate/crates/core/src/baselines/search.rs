//! Hyperparameter selection by k-fold cross-validation on the training
//! split.

use log::debug;

use super::elastic_net::{fit_elastic_net, ElasticNetModel, DEFAULT_MAX_ITER, DEFAULT_TOL};
use super::knn::KnnModel;
use crate::error::{Error, Result};

pub const K_GRID: [usize; 4] = [3, 5, 7, 9];
pub const LAMBDA_GRID: [f64; 4] = [0.1, 1.0, 10.0, 100.0];
pub const ALPHA_GRID: [f64; 3] = [0.1, 0.5, 0.9];
pub const CV_FOLDS: usize = 5;

/// Contiguous folds over the given order; fold `f` holds indices
/// `f·n/k .. (f+1)·n/k`.
fn folds(n: usize, k: usize) -> Vec<std::ops::Range<usize>> {
    (0..k).map(|f| f * n / k..(f + 1) * n / k).collect()
}

fn split(inputs: &[Vec<f64>], targets: &[f64], hold: &std::ops::Range<usize>) -> (Vec<Vec<f64>>, Vec<f64>) {
    let keep = |i: &usize| !hold.contains(i);
    let xs = (0..inputs.len()).filter(keep).map(|i| inputs[i].clone()).collect();
    let ys = (0..targets.len()).filter(keep).map(|i| targets[i]).collect();
    (xs, ys)
}

/// Mean absolute held-out error across folds; `None` if any fold fails.
fn cv_mae<M>(
    inputs: &[Vec<f64>],
    targets: &[f64],
    fit: impl Fn(&[Vec<f64>], &[f64]) -> Result<M>,
    predict: impl Fn(&M, &[f64]) -> Result<f64>,
) -> Option<f64> {
    let mut total = 0.0;
    for hold in folds(inputs.len(), CV_FOLDS) {
        let (xs, ys) = split(inputs, targets, &hold);
        let model = fit(&xs, &ys).ok()?;
        for i in hold {
            total += (predict(&model, &inputs[i]).ok()? - targets[i]).abs();
        }
    }
    Some(total / inputs.len() as f64)
}

fn check(inputs: &[Vec<f64>], targets: &[f64]) -> Result<()> {
    if inputs.len() != targets.len() {
        return Err(Error::DimensionMismatch {
            expected: inputs.len(),
            actual: targets.len(),
        });
    }
    if inputs.len() < CV_FOLDS {
        return Err(Error::MissingData(format!(
            "cross-validation needs at least {CV_FOLDS} cells, got {}",
            inputs.len()
        )));
    }
    Ok(())
}

/// Picks `k` from [`K_GRID`] by CV (lowest error, earliest on ties) and
/// refits on everything.
pub fn search_knn(inputs: &[Vec<f64>], targets: &[f64]) -> Result<KnnModel> {
    check(inputs, targets)?;
    let mut best: Option<(f64, usize)> = None;
    for k in K_GRID {
        if let Some(mae) = cv_mae(inputs, targets, |x, y| KnnModel::fit(x, y, k), |m, x| m.predict(x)) {
            debug!("knn k={k} cv_mae={mae}");
            if best.is_none_or(|(b, _)| mae < b) {
                best = Some((mae, k));
            }
        }
    }
    let (_, k) = best.ok_or_else(|| Error::Degenerate("no kNN grid point was feasible".into()))?;
    KnnModel::fit(inputs, targets, k)
}

/// Picks `(λ, α)` over [`LAMBDA_GRID`] × [`ALPHA_GRID`] by CV. Grid points
/// that fail to converge on any fold are skipped.
pub fn search_elastic_net(inputs: &[Vec<f64>], targets: &[f64]) -> Result<ElasticNetModel> {
    check(inputs, targets)?;
    let mut best: Option<(f64, f64, f64)> = None;
    for lambda in LAMBDA_GRID {
        for alpha in ALPHA_GRID {
            let fit = |x: &[Vec<f64>], y: &[f64]| fit_elastic_net(x, y, lambda, alpha, DEFAULT_TOL, DEFAULT_MAX_ITER);
            match cv_mae(inputs, targets, fit, |m, x| m.predict(x)) {
                Some(mae) => {
                    debug!("elastic net lambda={lambda} alpha={alpha} cv_mae={mae}");
                    if best.is_none_or(|(b, _, _)| mae < b) {
                        best = Some((mae, lambda, alpha));
                    }
                }
                None => debug!("elastic net lambda={lambda} alpha={alpha} skipped"),
            }
        }
    }
    let (_, lambda, alpha) = best.ok_or(Error::NotConverged {
        iterations: DEFAULT_MAX_ITER,
        last_delta: f64::NAN,
    })?;
    fit_elastic_net(inputs, targets, lambda, alpha, DEFAULT_TOL, DEFAULT_MAX_ITER)
}
