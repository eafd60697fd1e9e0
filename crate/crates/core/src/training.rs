//! Epoch loop shared by the variational network and the point network:
//! seeded shuffling, minibatch Adam, deterministic-pass MAE, plateau
//! schedule, best-epoch snapshot.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::{adam_step, AdamState, PlateauSchedule, ScheduleConfig};
use crate::seed::Rng;

pub(crate) trait Trainable: Clone {
    fn flat_params(&self) -> Vec<f64>;
    fn set_flat_params(&mut self, flat: &[f64]) -> Result<()>;
    /// Minibatch objective and its gradient; targets in cycles.
    fn loss_and_grad(&self, inputs: &[Vec<f64>], targets: &[f64], rng: &mut Rng) -> Result<(f64, Vec<f64>)>;
    /// Point prediction in cycles.
    fn point_prediction(&self, x: &[f64]) -> Result<f64>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Example-weighted mean minibatch loss.
    pub loss: f64,
    /// Training MAE of the deterministic pass, cycles.
    pub mae: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingHistory {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were returned.
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
}

impl TrainingHistory {
    pub fn lr_trace(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.lr).collect()
    }

    pub fn initial_mae(&self) -> Option<f64> {
        self.epochs.first().map(|e| e.mae)
    }

    pub fn best_mae(&self) -> Option<f64> {
        self.epochs.iter().map(|e| e.mae).reduce(f64::min)
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct LoopConfig {
    pub schedule: ScheduleConfig,
    pub max_epochs: usize,
    pub batch_size: usize,
}

pub(crate) fn mean_abs_error<T: Trainable>(model: &T, inputs: &[Vec<f64>], targets: &[f64]) -> Result<f64> {
    let mut total = 0.0;
    for (x, y) in inputs.iter().zip(targets) {
        total += (model.point_prediction(x)? - y).abs();
    }
    Ok(total / inputs.len() as f64)
}

pub(crate) fn fit<T: Trainable>(
    mut model: T,
    inputs: &[Vec<f64>],
    targets: &[f64],
    config: &LoopConfig,
    shuffle_rng: &mut Rng,
    noise_rng: &mut Rng,
) -> Result<(T, TrainingHistory)> {
    if inputs.is_empty() {
        return Err(Error::MissingData("training set is empty".into()));
    }
    if config.batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
    }
    let mut schedule = PlateauSchedule::new(config.schedule)?;
    let mut history = TrainingHistory::default();
    let mut params = model.flat_params();
    let mut adam = AdamState::new(params.len());
    let mut best = model.clone();
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    let mut batch_x: Vec<Vec<f64>> = Vec::with_capacity(config.batch_size);
    let mut batch_y: Vec<f64> = Vec::with_capacity(config.batch_size);

    for epoch in 1..=config.max_epochs {
        let lr = schedule.lr();
        order.shuffle(shuffle_rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(config.batch_size) {
            batch_x.clear();
            batch_y.clear();
            for &i in chunk {
                batch_x.push(inputs[i].clone());
                batch_y.push(targets[i]);
            }
            let (loss, grad) = model.loss_and_grad(&batch_x, &batch_y, noise_rng)?;
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteLoss { epoch });
            }
            loss_sum += loss * chunk.len() as f64;
            adam_step(&mut params, &grad, &mut adam, lr)?;
            model.set_flat_params(&params)?;
        }
        let mae = mean_abs_error(&model, inputs, targets)?;
        if !mae.is_finite() {
            return Err(Error::NonFiniteLoss { epoch });
        }
        history.epochs.push(EpochRecord {
            epoch,
            lr,
            loss: loss_sum / inputs.len() as f64,
            mae,
        });
        let outcome = schedule.observe(mae);
        if outcome.improved {
            best = model.clone();
            history.best_epoch = Some(epoch);
        }
        if outcome.stop {
            history.stopped_early = true;
            break;
        }
    }
    Ok((best, history))
}
