use serde::{Deserialize, Serialize};

use super::model::{gradients, BnnModel, Batch, Estimator, Init, ParamKind, TargetScaling};
use crate::error::{Error, Result};
use crate::optim::ScheduleConfig;
use crate::seed::{substream, Rng};
use crate::training::{fit, LoopConfig, Trainable, TrainingHistory};

/// Seed streams carved out of [`TrainConfig::seed`].
pub(crate) const STREAM_INIT: u64 = 1;
pub(crate) const STREAM_SHUFFLE: u64 = 2;
pub(crate) const STREAM_NOISE: u64 = 3;

/// Scaling of the KL term in the objective.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlWeightMode {
    /// `1 / n_train`.
    #[default]
    DatasetSize,
    /// `factor / n_train`.
    Scaled(f64),
    /// No KL term.
    Off,
}

impl KlWeightMode {
    pub fn weight(&self, n_train: usize) -> f64 {
        match *self {
            KlWeightMode::DatasetSize => 1.0 / n_train as f64,
            KlWeightMode::Scaled(f) => f / n_train as f64,
            KlWeightMode::Off => 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub initial_lr: f64,
    pub lr_halving_patience: usize,
    pub lr_floor: f64,
    pub early_stop_patience: usize,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub kl_weight_mode: KlWeightMode,
    pub seed: u64,
    pub hidden_dims: Vec<usize>,
    pub init: Init,
    pub estimator: Estimator,
    /// When false the posterior SDs stay at their initial value.
    pub learn_sigma: bool,
}

/// KL factor of the default configuration. With the full `1 / n_train`
/// weight the fitted intervals cover nearly every held-out cell.
pub const DEFAULT_KL_FACTOR: f64 = 0.3;

impl Default for TrainConfig {
    fn default() -> Self {
        let schedule = ScheduleConfig::default();
        Self {
            initial_lr: schedule.initial_lr,
            lr_halving_patience: schedule.lr_halving_patience,
            lr_floor: schedule.lr_floor,
            early_stop_patience: schedule.early_stop_patience,
            max_epochs: 1000,
            batch_size: 16,
            kl_weight_mode: KlWeightMode::Scaled(DEFAULT_KL_FACTOR),
            seed: 0,
            hidden_dims: vec![8, 8],
            init: Init::default(),
            estimator: Estimator::Flipout,
            learn_sigma: true,
        }
    }
}

impl TrainConfig {
    pub fn schedule(&self) -> ScheduleConfig {
        ScheduleConfig {
            initial_lr: self.initial_lr,
            lr_halving_patience: self.lr_halving_patience,
            lr_floor: self.lr_floor,
            early_stop_patience: self.early_stop_patience,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule().validate()?;
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
        }
        if self.hidden_dims.contains(&0) {
            return Err(Error::InvalidArgument("hidden widths must be >= 1".into()));
        }
        if !(self.init.mu_sd >= 0.0 && self.init.mu_sd.is_finite() && self.init.rho.is_finite()) {
            return Err(Error::InvalidArgument("invalid initialisation".into()));
        }
        Ok(())
    }

    pub(crate) fn loop_config(&self) -> LoopConfig {
        LoopConfig {
            schedule: self.schedule(),
            max_epochs: self.max_epochs,
            batch_size: self.batch_size,
        }
    }

    /// Freshly initialised, unscaled model for this configuration.
    pub fn init_model(&self, input_dim: usize) -> BnnModel {
        let mut rng = substream(self.seed, STREAM_INIT);
        let mut model = BnnModel::new(input_dim, &self.hidden_dims, &self.init, &mut rng);
        model.estimator = self.estimator;
        model
    }
}

#[derive(Clone)]
struct Objective {
    model: BnnModel,
    kl_weight: f64,
    rho_mask: Option<Vec<bool>>,
}

impl Trainable for Objective {
    fn flat_params(&self) -> Vec<f64> {
        self.model.flat_params()
    }

    fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        self.model.set_flat_params(flat)
    }

    fn loss_and_grad(&self, inputs: &[Vec<f64>], targets: &[f64], rng: &mut Rng) -> Result<(f64, Vec<f64>)> {
        let batch = Batch::new(inputs, targets)?;
        let noise = self.model.sample_noise(batch.len(), rng);
        let mut g = gradients(&self.model, &batch, &noise, self.kl_weight)?;
        if let Some(mask) = &self.rho_mask {
            for (v, &frozen) in g.flat.iter_mut().zip(mask) {
                if frozen {
                    *v = 0.0;
                }
            }
        }
        Ok((g.loss, g.flat))
    }

    fn point_prediction(&self, x: &[f64]) -> Result<f64> {
        Ok(self.model.deterministic(x)?.mean)
    }
}

/// Fits the variational network by minibatch Adam on the ELBO under the
/// plateau schedule. Inputs are standardised features, targets in cycles.
/// Returns the parameters of the best training-MAE epoch.
pub fn train(inputs: &[Vec<f64>], targets: &[f64], config: &TrainConfig) -> Result<(BnnModel, TrainingHistory)> {
    config.validate()?;
    if inputs.len() != targets.len() {
        return Err(Error::DimensionMismatch {
            expected: inputs.len(),
            actual: targets.len(),
        });
    }
    if inputs.len() < 2 {
        return Err(Error::MissingData(format!(
            "training needs at least 2 cells, got {}",
            inputs.len()
        )));
    }
    let input_dim = inputs[0].len();
    let mut model = config.init_model(input_dim);
    model.target = TargetScaling::fit(targets)?;
    let rho_mask = (!config.learn_sigma).then(|| {
        let mut mask = vec![false; model.flat_params().len()];
        for block in model.param_layout() {
            if block.kind == ParamKind::Rho {
                mask[block.offset..block.offset + block.len].fill(true);
            }
        }
        mask
    });
    let objective = Objective {
        model,
        kl_weight: config.kl_weight_mode.weight(inputs.len()),
        rho_mask,
    };
    let mut shuffle = substream(config.seed, STREAM_SHUFFLE);
    let mut noise = substream(config.seed, STREAM_NOISE);
    let (best, history) = fit(objective, inputs, targets, &config.loop_config(), &mut shuffle, &mut noise)?;
    log::debug!(
        "variational fit: {} epochs, best epoch {:?}, training MAE {:.2}, KL {:.1}",
        history.epochs.len(),
        history.best_epoch,
        history.best_mae().unwrap_or(f64::NAN),
        best.model.kl()
    );
    Ok((best.model, history))
}
