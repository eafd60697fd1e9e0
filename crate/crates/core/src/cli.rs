//! Command-line front end. Exit codes: 0 success, 1 usage, 2 data or
//! validation, 3 numerical failure.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::{info, warn};

use crate::bnn::{train, ModelDocument, TrainConfig};
use crate::data::{filter_usable, load_cell_histories, save_cell_histories, DEFAULT_MIN_EOL};
use crate::error::{Error, Result};
use crate::eval::{run_experiment, ExperimentConfig, ModelKind, DEFAULT_TRAIN_FRAC};
use crate::features::{featurize, write_feature_csv, FeatureConfig, FeatureRow, Standardizer};
use crate::predictor::{predict, write_density_csv, write_jsonl, Histogram, PredictionRecord, HISTOGRAM_BINS};
use crate::seed::rng_from;
use crate::synthetic::{generate_fleet, CycleHorizon, FleetRanges, Span};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "bnn-eol", version, about = "Battery end-of-life prediction with a variational Bayesian network")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic fleet as a cellhist-v1 file.
    Synth(SynthArgs),
    /// Write the nine features of every cell at one cycle as CSV.
    Featurize(FeaturizeArgs),
    /// Train a model at one prediction cycle.
    Train(TrainArgs),
    /// Predict the EoL of one cell with its 95% interval.
    Predict(PredictArgs),
    /// Run the repeated-split experiment and write the report.
    Evaluate(EvaluateArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub cells: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Target EoL range as MIN:MAX.
    #[arg(long, value_parser = parse_u32_span)]
    pub eol_range: Option<Span<u32>>,
    /// Relative noise range as MIN:MAX.
    #[arg(long, value_parser = parse_f64_span)]
    pub noise: Option<Span<f64>>,
    /// Fixed number of cycles per cell instead of running through EoL.
    #[arg(long)]
    pub horizon: Option<u32>,
}

#[derive(Debug, Args)]
pub struct FeaturizeArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub cycle: u32,
    /// Output CSV; standard output when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub cycle: u32,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub model_out: PathBuf,
    /// JSON training configuration; missing keys take defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_MIN_EOL)]
    pub min_eol: u32,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub cell: String,
    /// Defaults to the model's prediction cycle.
    #[arg(long)]
    pub cycle: Option<u32>,
    #[arg(long, default_value_t = 100)]
    pub samples: usize,
    #[arg(long)]
    pub seed: u64,
    /// JSON-lines output; standard output when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Histogram density CSV of the samples.
    #[arg(long)]
    pub density_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub runs: usize,
    #[arg(long)]
    pub seed: u64,
    #[arg(long, default_value = "bnn,nn,knn,en")]
    pub models: String,
    #[arg(long, default_value = "100,200,300,400", value_delimiter = ',')]
    pub cycles: Vec<u32>,
    #[arg(long)]
    pub out_table: PathBuf,
    #[arg(long)]
    pub out_json: PathBuf,
    /// JSON-lines test predictions of every run.
    #[arg(long)]
    pub out_predictions: Option<PathBuf>,
    /// JSON training configuration for the networks.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    pub samples: usize,
    #[arg(long, default_value_t = DEFAULT_MIN_EOL)]
    pub min_eol: u32,
    #[arg(long, default_value_t = DEFAULT_TRAIN_FRAC)]
    pub train_frac: f64,
}

fn parse_span<T: std::str::FromStr>(s: &str) -> std::result::Result<Span<T>, String> {
    let (a, b) = s.split_once(':').ok_or_else(|| format!("expected MIN:MAX, got `{s}`"))?;
    let parse = |v: &str| v.trim().parse::<T>().map_err(|_| format!("invalid bound `{v}`"));
    Ok(Span::new(parse(a)?, parse(b)?))
}

fn parse_u32_span(s: &str) -> std::result::Result<Span<u32>, String> {
    parse_span(s)
}

fn parse_f64_span(s: &str) -> std::result::Result<Span<f64>, String> {
    parse_span(s)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?))
}

fn finish<W: Write>(mut w: W, path: &Path) -> Result<()> {
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_train_config(path: Option<&Path>) -> Result<TrainConfig> {
    match path {
        None => Ok(TrainConfig::default()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str(&text)
                .map_err(|e| Error::InvalidArgument(format!("{}: {e}", p.display())))
        }
    }
}

fn synth(a: &SynthArgs) -> Result<()> {
    let mut ranges = FleetRanges::default();
    if let Some(span) = a.eol_range {
        ranges.target_eol = span;
    }
    if let Some(span) = a.noise {
        ranges.noise_scale = span;
    }
    if let Some(n) = a.horizon {
        ranges.horizon = CycleHorizon::Fixed(n);
    }
    let fleet = generate_fleet(a.seed, a.cells, &ranges)?;
    save_cell_histories(&a.out, &fleet)?;
    info!("wrote {} cells to {}", fleet.len(), a.out.display());
    Ok(())
}

fn featurize_cmd(a: &FeaturizeArgs) -> Result<()> {
    let histories = load_cell_histories(&a.input, None)?;
    let config = FeatureConfig::default();
    let rows = histories
        .iter()
        .map(|h| {
            Ok(FeatureRow {
                cell_id: h.cell_id.clone(),
                eol_cycle: h.resolved_eol(),
                features: featurize(h, a.cycle, &config)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    match &a.out {
        Some(path) => {
            let mut w = create(path)?;
            write_feature_csv(&mut w, &rows)?;
            finish(w, path)
        }
        None => write_feature_csv(std::io::stdout().lock(), &rows),
    }
}

fn train_cmd(a: &TrainArgs) -> Result<()> {
    let mut config = read_train_config(a.config.as_deref())?;
    config.seed = a.seed;
    let histories = filter_usable(load_cell_histories(&a.input, None)?, a.min_eol)?;
    let feature_config = FeatureConfig::default();
    let features = histories
        .iter()
        .map(|h| featurize(h, a.cycle, &feature_config))
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<f64> = histories.iter().map(|h| f64::from(h.eol_cycle.expect("labelled"))).collect();
    let standardizer = Standardizer::fit(&features)?;
    let inputs: Vec<Vec<f64>> = features.iter().map(|f| standardizer.apply(f).to_vec()).collect();
    let (model, history) = train(&inputs, &labels, &config)?;
    info!(
        "trained on {} cells for {} epochs, best training MAE {:.2}",
        inputs.len(),
        history.epochs.len(),
        history.best_mae().unwrap_or(f64::NAN)
    );
    ModelDocument::new(model, standardizer, feature_config, config, a.cycle).save(&a.model_out)
}

fn predict_cmd(a: &PredictArgs) -> Result<()> {
    let doc = ModelDocument::load(&a.model)?;
    let cycle = a.cycle.unwrap_or(doc.prediction_cycle);
    if cycle != doc.prediction_cycle {
        return Err(Error::InvalidArgument(format!(
            "model was trained at cycle {}, not {cycle}",
            doc.prediction_cycle
        )));
    }
    let histories = load_cell_histories(&a.input, None)?;
    let history = histories
        .iter()
        .find(|h| h.cell_id == a.cell)
        .ok_or_else(|| Error::MissingData(format!("cell {} not found in {}", a.cell, a.input.display())))?;
    let mut rng = rng_from(a.seed);
    let p = predict(&doc.model, &doc.standardizer, &doc.feature_config, history, cycle, a.samples, &mut rng)?;
    let record = PredictionRecord::from_prediction(&history.cell_id, cycle, "bnn", &p, history.resolved_eol())?;
    match &a.out {
        Some(path) => {
            let mut w = create(path)?;
            write_jsonl(&mut w, &[record])?;
            finish(w, path)?;
        }
        None => write_jsonl(std::io::stdout().lock(), &[record])?,
    }
    if let Some(path) = &a.density_out {
        let mut w = create(path)?;
        write_density_csv(&mut w, &Histogram::new(&p.samples, HISTOGRAM_BINS)?)?;
        finish(w, path)?;
    }
    Ok(())
}

fn evaluate_cmd(a: &EvaluateArgs) -> Result<()> {
    let models = ModelKind::parse_list(&a.models)?;
    let loaded = load_cell_histories(&a.input, None)?;
    let total = loaded.len();
    let histories = filter_usable(loaded, a.min_eol)?;
    if histories.len() < total {
        warn!("excluded {} cells with EoL below {}", total - histories.len(), a.min_eol);
    }
    let config = ExperimentConfig {
        cycles: a.cycles.clone(),
        n_runs: a.runs,
        train_frac: a.train_frac,
        base_seed: a.seed,
        models,
        train: read_train_config(a.config.as_deref())?,
        n_samples: a.samples,
        keep_predictions: a.out_predictions.is_some(),
        ..Default::default()
    };
    let report = run_experiment(&histories, &config)?;
    let mut w = create(&a.out_table)?;
    report.write_table(&mut w)?;
    finish(w, &a.out_table)?;
    let mut w = create(&a.out_json)?;
    w.write_all(report.to_json()?.as_bytes()).map_err(|e| Error::io(&a.out_json, e))?;
    finish(w, &a.out_json)?;
    if let Some(path) = &a.out_predictions {
        let mut w = create(path)?;
        write_jsonl(&mut w, &report.predictions())?;
        finish(w, path)?;
    }
    Ok(())
}

pub fn execute(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Synth(a) => synth(a),
        Command::Featurize(a) => featurize_cmd(a),
        Command::Train(a) => train_cmd(a),
        Command::Predict(a) => predict_cmd(a),
        Command::Evaluate(a) => evaluate_cmd(a),
    }
}

pub fn exit_code(error: &Error) -> i32 {
    match error {
        e if e.is_numerical() => EXIT_NUMERICAL,
        Error::InvalidArgument(_) => EXIT_USAGE,
        _ => EXIT_DATA,
    }
}

/// Parses `argv` (including the program name), runs the subcommand and
/// returns the process exit code. Diagnostics go to standard error.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            exit_code(&e)
        }
    }
}
