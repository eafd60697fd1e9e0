//! Repeated-split experiment harness: seeded 80/20 splits, one model per
//! prediction cycle and run, MAE/MAPE/σ/coverage aggregated across runs.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use log::{info, warn};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{search_elastic_net, search_knn, train_point_nn, PointLoss};
use crate::bnn::{train, TrainConfig};
use crate::data::CellHistory;
use crate::error::{Error, Result};
use crate::features::{featurize_view, FeatureConfig, FeatureVector, Standardizer};
use crate::predictor::{predict_features, EolPrediction, PredictionRecord, DEFAULT_SAMPLES};
use crate::seed::{derive_seed, substream};

pub const DEFAULT_CYCLES: [u32; 4] = [100, 200, 300, 400];
pub const DEFAULT_RUNS: usize = 10;
pub const DEFAULT_TRAIN_FRAC: f64 = 0.8;
/// Comparison models named in reports but not provided.
pub const NOT_IMPLEMENTED: [&str; 1] = ["svr"];

/// `(MAE, MAPE %)`.
pub fn metrics(predictions: &[f64], actuals: &[f64]) -> Result<(f64, f64)> {
    if predictions.len() != actuals.len() {
        return Err(Error::DimensionMismatch {
            expected: predictions.len(),
            actual: actuals.len(),
        });
    }
    if predictions.is_empty() {
        return Err(Error::MissingData("no predictions to score".into()));
    }
    if actuals.contains(&0.0) {
        return Err(Error::InvalidArgument("actual EoL of zero".into()));
    }
    let n = predictions.len() as f64;
    let (mut ae, mut ape) = (0.0, 0.0);
    for (p, a) in predictions.iter().zip(actuals) {
        ae += (p - a).abs();
        ape += (p - a).abs() / a.abs();
    }
    Ok((ae / n, ape / n * 100.0))
}

/// Percentage of actuals inside their interval, bounds inclusive.
pub fn ci_coverage(predictions: &[EolPrediction], actuals: &[f64]) -> Result<f64> {
    if predictions.len() != actuals.len() {
        return Err(Error::DimensionMismatch {
            expected: predictions.len(),
            actual: actuals.len(),
        });
    }
    if predictions.is_empty() {
        return Err(Error::MissingData("no predictions to score".into()));
    }
    let inside = predictions.iter().zip(actuals).filter(|(p, &a)| p.contains(a)).count();
    Ok(inside as f64 / predictions.len() as f64 * 100.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Bnn,
    Nn,
    Knn,
    En,
}

impl ModelKind {
    pub const ALL: [ModelKind; 4] = [ModelKind::Bnn, ModelKind::Nn, ModelKind::Knn, ModelKind::En];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Bnn => "bnn",
            ModelKind::Nn => "nn",
            ModelKind::Knn => "knn",
            ModelKind::En => "en",
        }
    }

    pub fn has_uncertainty(self) -> bool {
        self == ModelKind::Bnn
    }

    /// Comma-separated list such as `bnn,nn,knn,en`.
    pub fn parse_list(text: &str) -> Result<Vec<ModelKind>> {
        let mut out = Vec::new();
        for part in text.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let kind: ModelKind = part.parse()?;
            if !out.contains(&kind) {
                out.push(kind);
            }
        }
        if out.is_empty() {
            return Err(Error::InvalidArgument("no models selected".into()));
        }
        Ok(out)
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bnn" => Ok(ModelKind::Bnn),
            "nn" => Ok(ModelKind::Nn),
            "knn" => Ok(ModelKind::Knn),
            "en" => Ok(ModelKind::En),
            "svr" => Err(Error::InvalidArgument("model `svr` is not implemented".into())),
            other => Err(Error::InvalidArgument(format!("unknown model `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub cycles: Vec<u32>,
    pub n_runs: usize,
    pub train_frac: f64,
    pub base_seed: u64,
    pub models: Vec<ModelKind>,
    /// Shared by the variational and deterministic networks; the seed is
    /// replaced per run and cycle.
    pub train: TrainConfig,
    pub feature_config: FeatureConfig,
    pub n_samples: usize,
    /// Keep per-cell test predictions in the report.
    pub keep_predictions: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            cycles: DEFAULT_CYCLES.to_vec(),
            n_runs: DEFAULT_RUNS,
            train_frac: DEFAULT_TRAIN_FRAC,
            base_seed: 0,
            models: ModelKind::ALL.to_vec(),
            train: TrainConfig::default(),
            feature_config: FeatureConfig::default(),
            n_samples: DEFAULT_SAMPLES,
            keep_predictions: false,
        }
    }
}

/// Scores of one model at one cycle in one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelScores {
    pub cycle: u32,
    pub model: ModelKind,
    pub train_mae: f64,
    pub train_mape: f64,
    pub test_mae: f64,
    pub test_mape: f64,
    pub test_sigma: Option<f64>,
    pub test_coverage: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub run: usize,
    pub seed: u64,
    pub train_cells: Vec<String>,
    pub test_cells: Vec<String>,
    pub scores: Vec<ModelScores>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub predictions: Vec<PredictionRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExcludedRun {
    pub run: usize,
    pub seed: u64,
    pub reason: String,
}

/// Across-run means for one (cycle, model).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub cycle: u32,
    pub model: ModelKind,
    pub train_mae: f64,
    pub test_mae: f64,
    pub train_mape: f64,
    pub test_mape: f64,
    pub test_sigma: Option<f64>,
    pub test_coverage: Option<f64>,
    pub n_runs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub cycles: Vec<u32>,
    pub models: Vec<ModelKind>,
    pub not_implemented: Vec<String>,
    pub base_seed: u64,
    pub seeds: Vec<u64>,
    pub n_runs: usize,
    pub excluded: Vec<ExcludedRun>,
    pub rows: Vec<ReportRow>,
    pub runs: Vec<RunResult>,
}

impl ExperimentReport {
    pub fn row(&self, cycle: u32, model: ModelKind) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.cycle == cycle && r.model == model)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::ModelFormat(e.to_string()))
    }

    /// One row per cycle; per model the train/test MAE and MAPE, test σ
    /// and coverage. σ and coverage are empty for point models.
    pub fn write_table<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let err = |e: csv::Error| Error::io("<report csv>", std::io::Error::other(e));
        let mut header = vec!["cycle".to_string()];
        for m in &self.models {
            for col in ["train_mae", "test_mae", "train_mape", "test_mape", "test_sigma", "test_coverage"] {
                header.push(format!("{m}_{col}"));
            }
        }
        header.extend(self.not_implemented.iter().cloned());
        w.write_record(&header).map_err(err)?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for &c in &self.cycles {
            let mut rec = vec![c.to_string()];
            for &m in &self.models {
                match self.row(c, m) {
                    Some(r) => rec.extend([
                        r.train_mae.to_string(),
                        r.test_mae.to_string(),
                        r.train_mape.to_string(),
                        r.test_mape.to_string(),
                        opt(r.test_sigma),
                        opt(r.test_coverage),
                    ]),
                    None => rec.extend(std::iter::repeat_n(String::new(), 6)),
                }
            }
            rec.extend(self.not_implemented.iter().map(|_| "not implemented".to_string()));
            w.write_record(&rec).map_err(err)?;
        }
        w.flush().map_err(|e| Error::io("<report csv>", e))
    }

    /// Test predictions from every run as report records.
    pub fn predictions(&self) -> Vec<PredictionRecord> {
        self.runs.iter().flat_map(|r| r.predictions.iter().cloned()).collect()
    }
}

/// Features at cycle `c` from a view that provably ends at `c`.
fn guarded_features(history: &CellHistory, c: u32, config: &FeatureConfig) -> Result<FeatureVector> {
    let view = history.up_to(c);
    if view.last_cycle_index() != Some(c) {
        return Err(Error::MissingData(format!(
            "cell {} has no cycle {c}",
            history.cell_id
        )));
    }
    assert!(
        view.cycles().iter().all(|r| r.cycle_index <= c),
        "feature view for cycle {c} reaches past it"
    );
    featurize_view(&view, c, config)
}

/// Seeded split of `0..n` into (train, test) index sets.
pub fn split_indices(n: usize, train_frac: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(train_frac > 0.0 && train_frac < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "train_frac must lie in (0, 1), got {train_frac}"
        )));
    }
    let n_train = ((n as f64) * train_frac).round() as usize;
    if n_train < 2 || n_train >= n {
        return Err(Error::MissingData(format!(
            "{n} cells cannot be split into >= 2 training and >= 1 test cells"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut substream(seed, 0));
    let mut test = order.split_off(n_train);
    order.sort_unstable();
    test.sort_unstable();
    Ok((order, test))
}

struct CellTable<'a> {
    ids: Vec<&'a str>,
    labels: Vec<f64>,
    /// `features[cycle position][cell]`.
    features: Vec<Vec<FeatureVector>>,
}

fn pick<T: Clone>(v: &[T], idx: &[usize]) -> Vec<T> {
    idx.iter().map(|&i| v[i].clone()).collect()
}

fn score_points(
    cycle: u32,
    model: ModelKind,
    train: (&[f64], &[f64]),
    test: (&[f64], &[f64]),
) -> Result<ModelScores> {
    let (train_mae, train_mape) = metrics(train.0, train.1)?;
    let (test_mae, test_mape) = metrics(test.0, test.1)?;
    Ok(ModelScores {
        cycle,
        model,
        train_mae,
        train_mape,
        test_mae,
        test_mape,
        test_sigma: None,
        test_coverage: None,
    })
}

fn run_once(table: &CellTable<'_>, config: &ExperimentConfig, run: usize) -> Result<RunResult> {
    let seed = derive_seed(config.base_seed, run as u64);
    let (train_idx, test_idx) = split_indices(table.ids.len(), config.train_frac, seed)?;
    let y_train = pick(&table.labels, &train_idx);
    let y_test = pick(&table.labels, &test_idx);
    let mut result = RunResult {
        run,
        seed,
        train_cells: train_idx.iter().map(|&i| table.ids[i].to_string()).collect(),
        test_cells: test_idx.iter().map(|&i| table.ids[i].to_string()).collect(),
        scores: Vec::new(),
        predictions: Vec::new(),
    };
    for (pos, &c) in config.cycles.iter().enumerate() {
        let fv = &table.features[pos];
        let standardizer = Standardizer::fit(&pick(fv, &train_idx))?;
        let x = |idx: &[usize]| -> Vec<Vec<f64>> {
            idx.iter().map(|&i| standardizer.apply(&fv[i]).to_vec()).collect()
        };
        let (x_train, x_test) = (x(&train_idx), x(&test_idx));
        let cycle_seed = derive_seed(seed, 1 + c as u64);
        let train_config = TrainConfig {
            seed: cycle_seed,
            ..config.train.clone()
        };
        for &kind in &config.models {
            let point = |f: &dyn Fn(&[f64]) -> Result<f64>| -> Result<(Vec<f64>, Vec<f64>)> {
                let a = x_train.iter().map(|v| f(v)).collect::<Result<Vec<_>>>()?;
                let b = x_test.iter().map(|v| f(v)).collect::<Result<Vec<_>>>()?;
                Ok((a, b))
            };
            let (p_train, p_test) = match kind {
                ModelKind::Bnn => {
                    let (model, _) = train(&x_train, &y_train, &train_config)?;
                    let mut rng = substream(cycle_seed, 100);
                    let mut predict = |fs: &[usize]| -> Result<Vec<EolPrediction>> {
                        fs.iter()
                            .map(|&i| predict_features(&model, &standardizer, &fv[i], config.n_samples, &mut rng))
                            .collect()
                    };
                    let pr_train = predict(&train_idx)?;
                    let pr_test = predict(&test_idx)?;
                    let mu_train: Vec<f64> = pr_train.iter().map(|p| p.mu).collect();
                    let mu_test: Vec<f64> = pr_test.iter().map(|p| p.mu).collect();
                    let mut s = score_points(c, kind, (&mu_train, &y_train), (&mu_test, &y_test))?;
                    s.test_sigma = Some(pr_test.iter().map(|p| p.sigma).sum::<f64>() / pr_test.len() as f64);
                    s.test_coverage = Some(ci_coverage(&pr_test, &y_test)?);
                    result.scores.push(s);
                    if config.keep_predictions {
                        for (p, &i) in pr_test.iter().zip(&test_idx) {
                            let mut rec = PredictionRecord::from_prediction(table.ids[i], c, kind.name(), p, Some(table.labels[i] as u32))?;
                            rec.run = Some(run);
                            result.predictions.push(rec);
                        }
                    }
                    continue;
                }
                ModelKind::Nn => {
                    let (model, _) = train_point_nn(&x_train, &y_train, &train_config, PointLoss::Mse)?;
                    point(&|v| model.predict(v))?
                }
                ModelKind::Knn => {
                    let model = search_knn(&x_train, &y_train)?;
                    point(&|v| model.predict(v))?
                }
                ModelKind::En => {
                    let model = search_elastic_net(&x_train, &y_train)?;
                    point(&|v| model.predict(v))?
                }
            };
            result.scores.push(score_points(c, kind, (&p_train, &y_train), (&p_test, &y_test))?);
            if config.keep_predictions {
                for (&mu, &i) in p_test.iter().zip(&test_idx) {
                    let mut rec = PredictionRecord::point(table.ids[i], c, kind.name(), mu, Some(table.labels[i] as u32));
                    rec.run = Some(run);
                    result.predictions.push(rec);
                }
            }
        }
    }
    Ok(result)
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for v in values {
        s += v;
        n += 1;
    }
    s / n as f64
}

fn aggregate(config: &ExperimentConfig, runs: &[RunResult]) -> Vec<ReportRow> {
    let mut rows = Vec::new();
    for &c in &config.cycles {
        for &m in &config.models {
            let s: Vec<&ModelScores> = runs
                .iter()
                .flat_map(|r| r.scores.iter())
                .filter(|s| s.cycle == c && s.model == m)
                .collect();
            let opt_mean = |f: fn(&ModelScores) -> Option<f64>| {
                m.has_uncertainty().then(|| mean(s.iter().filter_map(|x| f(x))))
            };
            rows.push(ReportRow {
                cycle: c,
                model: m,
                train_mae: mean(s.iter().map(|x| x.train_mae)),
                test_mae: mean(s.iter().map(|x| x.test_mae)),
                train_mape: mean(s.iter().map(|x| x.train_mape)),
                test_mape: mean(s.iter().map(|x| x.test_mape)),
                test_sigma: opt_mean(|x| x.test_sigma),
                test_coverage: opt_mean(|x| x.test_coverage),
                n_runs: s.len(),
            });
        }
    }
    rows
}

/// Runs the repeated-split protocol. Histories need EoL labels and at
/// least `max(cycles)` cycles. Each run gets seed `derive_seed(base_seed,
/// run)` and a single split reused across cycles. Runs that fail are
/// logged and excluded; the experiment fails only if every run does.
pub fn run_experiment(histories: &[CellHistory], config: &ExperimentConfig) -> Result<ExperimentReport> {
    if config.n_runs == 0 {
        return Err(Error::InvalidArgument("n_runs must be >= 1".into()));
    }
    if config.cycles.is_empty() || config.models.is_empty() {
        return Err(Error::InvalidArgument("need at least one cycle and one model".into()));
    }
    let labels = histories
        .iter()
        .map(|h| {
            h.resolved_eol()
                .map(f64::from)
                .ok_or_else(|| Error::MissingData(format!("cell {} has no EoL label", h.cell_id)))
        })
        .collect::<Result<Vec<_>>>()?;
    // Needs the same cell count as a run, checked before featurising.
    split_indices(histories.len(), config.train_frac, config.base_seed)?;
    let features = config
        .cycles
        .iter()
        .map(|&c| {
            histories
                .par_iter()
                .map(|h| guarded_features(h, c, &config.feature_config))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let table = CellTable {
        ids: histories.iter().map(|h| h.cell_id.as_str()).collect(),
        labels,
        features,
    };

    let outcomes: Vec<Result<RunResult>> = (0..config.n_runs)
        .into_par_iter()
        .map(|r| run_once(&table, config, r))
        .collect();
    let mut runs = Vec::new();
    let mut excluded = Vec::new();
    let mut first_error = None;
    for (r, outcome) in outcomes.into_iter().enumerate() {
        let seed = derive_seed(config.base_seed, r as u64);
        match outcome {
            Ok(result) => {
                info!("run {r} finished");
                runs.push(result);
            }
            Err(e) => {
                warn!("run {r} excluded: {e}");
                excluded.push(ExcludedRun {
                    run: r,
                    seed,
                    reason: e.to_string(),
                });
                first_error.get_or_insert(e);
            }
        }
    }
    if runs.is_empty() {
        return Err(first_error.expect("at least one run"));
    }
    Ok(ExperimentReport {
        cycles: config.cycles.clone(),
        models: config.models.clone(),
        not_implemented: NOT_IMPLEMENTED.iter().map(|s| s.to_string()).collect(),
        base_seed: config.base_seed,
        seeds: (0..config.n_runs).map(|r| derive_seed(config.base_seed, r as u64)).collect(),
        n_runs: config.n_runs,
        excluded,
        rows: aggregate(config, &runs),
        runs,
    })
}
