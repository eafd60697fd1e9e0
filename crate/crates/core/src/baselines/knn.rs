use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// k-nearest-neighbour regression in standardised feature space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnnModel {
    pub inputs: Vec<Vec<f64>>,
    pub targets: Vec<f64>,
    pub k: usize,
}

impl KnnModel {
    pub fn fit(inputs: &[Vec<f64>], targets: &[f64], k: usize) -> Result<Self> {
        if inputs.is_empty() {
            return Err(Error::MissingData("kNN needs training points".into()));
        }
        if inputs.len() != targets.len() {
            return Err(Error::DimensionMismatch {
                expected: inputs.len(),
                actual: targets.len(),
            });
        }
        if k == 0 || k > inputs.len() {
            return Err(Error::InvalidArgument(format!(
                "k must lie in 1..={}, got {k}",
                inputs.len()
            )));
        }
        Ok(Self {
            inputs: inputs.to_vec(),
            targets: targets.to_vec(),
            k,
        })
    }

    /// Indices of the `k` nearest training points, nearest first; equal
    /// distances go to the lower index.
    pub fn neighbours(&self, x: &[f64]) -> Result<Vec<usize>> {
        let dim = self.inputs[0].len();
        if x.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                actual: x.len(),
            });
        }
        let mut dist: Vec<(f64, usize)> = self
            .inputs
            .iter()
            .enumerate()
            .map(|(i, p)| (p.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum(), i))
            .collect();
        dist.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        Ok(dist.into_iter().take(self.k).map(|(_, i)| i).collect())
    }

    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        let idx = self.neighbours(x)?;
        Ok(idx.iter().map(|&i| self.targets[i]).sum::<f64>() / idx.len() as f64)
    }
}
