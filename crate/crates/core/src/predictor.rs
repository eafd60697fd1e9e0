//! EoL prediction with uncertainty: repeated posterior sampling, a
//! Gaussian fit and a 95% interval.

use std::io::Write;

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::bnn::{sample_forward, BnnModel};
use crate::data::CellHistory;
use crate::error::{Error, Result};
use crate::features::{featurize, FeatureConfig, FeatureVector, Standardizer};
use crate::seed::Rng;

pub const Z_95: f64 = 1.96;
pub const DEFAULT_SAMPLES: usize = 100;
pub const HISTOGRAM_BINS: usize = 100;

/// What one predictive sample contains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleMode {
    /// Weight draw, then a draw from the head's Gaussian.
    #[default]
    Total,
    /// Head mean under a weight draw.
    EpistemicOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EolPrediction {
    pub mu: f64,
    pub sigma: f64,
    pub n_samples: usize,
    pub ci95: (f64, f64),
    pub samples: Vec<f64>,
}

impl EolPrediction {
    pub fn from_samples(samples: Vec<f64>) -> Result<Self> {
        let (mu, sigma) = fit_gaussian(&samples)?;
        Ok(Self {
            mu,
            sigma,
            n_samples: samples.len(),
            ci95: ci95(mu, sigma)?,
            samples,
        })
    }

    pub fn contains(&self, actual: f64) -> bool {
        self.ci95.0 <= actual && actual <= self.ci95.1
    }
}

/// Raw model input for a standardised feature vector.
pub fn model_input(standardizer: &Standardizer, fv: &FeatureVector) -> Vec<f64> {
    standardizer.apply(fv).to_vec()
}

pub fn sample_predictions(model: &BnnModel, x: &[f64], n: usize, rng: &mut Rng, mode: SampleMode) -> Result<Vec<f64>> {
    if n < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 samples, got {n}")));
    }
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let (mean, sd) = sample_forward(model, x, rng)?;
        out.push(match mode {
            SampleMode::Total => {
                let e: f64 = rng.sample(StandardNormal);
                mean + sd * e
            }
            SampleMode::EpistemicOnly => mean,
        });
    }
    Ok(out)
}

/// Mean and `n − 1` sample SD.
pub fn fit_gaussian(samples: &[f64]) -> Result<(f64, f64)> {
    let n = samples.len();
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "Gaussian fit needs at least 2 samples, got {n}"
        )));
    }
    let mu = samples.iter().sum::<f64>() / n as f64;
    let ss: f64 = samples.iter().map(|s| (s - mu) * (s - mu)).sum();
    Ok((mu, (ss / (n - 1) as f64).sqrt()))
}

pub fn ci95(mu: f64, sigma: f64) -> Result<(f64, f64)> {
    if !(sigma >= 0.0) {
        return Err(Error::InvalidArgument(format!("sigma must be >= 0, got {sigma}")));
    }
    Ok((mu - Z_95 * sigma, mu + Z_95 * sigma))
}

pub fn predict_features(
    model: &BnnModel,
    standardizer: &Standardizer,
    fv: &FeatureVector,
    n: usize,
    rng: &mut Rng,
) -> Result<EolPrediction> {
    let x = model_input(standardizer, fv);
    EolPrediction::from_samples(sample_predictions(model, &x, n, rng, SampleMode::Total)?)
}

pub fn predict(
    model: &BnnModel,
    standardizer: &Standardizer,
    config: &FeatureConfig,
    history: &CellHistory,
    c: u32,
    n: usize,
    rng: &mut Rng,
) -> Result<EolPrediction> {
    let fv = featurize(history, c, config)?;
    predict_features(model, standardizer, &fv, n, rng)
}

/// Equal-width histogram over the sample range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub lower: f64,
    pub upper: f64,
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn new(samples: &[f64], bins: usize) -> Result<Self> {
        if samples.is_empty() || bins == 0 {
            return Err(Error::InvalidArgument("histogram needs samples and bins".into()));
        }
        let lower = samples.iter().copied().fold(f64::INFINITY, f64::min);
        let upper = samples.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut counts = vec![0; bins];
        let width = (upper - lower) / bins as f64;
        for &s in samples {
            let bin = if width > 0.0 {
                (((s - lower) / width) as usize).min(bins - 1)
            } else {
                0
            };
            counts[bin] += 1;
        }
        Ok(Self { lower, upper, counts })
    }

    pub fn bin_width(&self) -> f64 {
        (self.upper - self.lower) / self.counts.len() as f64
    }

    /// `(bin_lower, bin_upper, count, probability density)` per bin.
    pub fn rows(&self) -> Vec<(f64, f64, usize, f64)> {
        let w = self.bin_width();
        let total: usize = self.counts.iter().sum();
        self.counts
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let lo = self.lower + w * i as f64;
                let density = if w > 0.0 { c as f64 / (total as f64 * w) } else { f64::NAN };
                (lo, lo + w, c, density)
            })
            .collect()
    }
}

/// One line of the prediction report. `sigma` and `ci95` are absent for
/// point models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub cell_id: String,
    pub c: u32,
    pub model: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub run: Option<usize>,
    pub mu: f64,
    pub sigma: Option<f64>,
    pub ci95: Option<(f64, f64)>,
    pub n: Option<usize>,
    pub actual: Option<u32>,
    pub histogram: Option<Histogram>,
}

impl PredictionRecord {
    pub fn from_prediction(cell_id: &str, c: u32, model: &str, p: &EolPrediction, actual: Option<u32>) -> Result<Self> {
        Ok(Self {
            cell_id: cell_id.into(),
            c,
            model: model.into(),
            run: None,
            mu: p.mu,
            sigma: Some(p.sigma),
            ci95: Some(p.ci95),
            n: Some(p.n_samples),
            actual,
            histogram: Some(Histogram::new(&p.samples, HISTOGRAM_BINS)?),
        })
    }

    pub fn point(cell_id: &str, c: u32, model: &str, mu: f64, actual: Option<u32>) -> Self {
        Self {
            cell_id: cell_id.into(),
            c,
            model: model.into(),
            run: None,
            mu,
            sigma: None,
            ci95: None,
            n: None,
            actual,
            histogram: None,
        }
    }
}

pub fn write_jsonl<W: Write>(mut out: W, records: &[PredictionRecord]) -> Result<()> {
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::ModelFormat(e.to_string()))?;
        writeln!(out, "{line}").map_err(|e| Error::io("<output>", e))?;
    }
    Ok(())
}

pub fn write_density_csv<W: Write>(out: W, histogram: &Histogram) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let err = |e: csv::Error| Error::io("<density csv>", std::io::Error::other(e));
    w.write_record(["bin_lower", "bin_upper", "count", "density"]).map_err(err)?;
    for (lo, hi, c, d) in histogram.rows() {
        w.write_record([lo.to_string(), hi.to_string(), c.to_string(), d.to_string()])
            .map_err(err)?;
    }
    w.flush().map_err(|e| Error::io("<density csv>", e))
}
