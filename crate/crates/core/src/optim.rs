//! Adam and the plateau learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

/// Adam moment estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, lr: f64) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::DimensionMismatch {
            expected: params.len(),
            actual: grads.len().min(state.m.len()),
        });
    }
    state.t += 1;
    let bc1 = 1.0 - ADAM_BETA1.powi(state.t as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(state.t as i32);
    for (((p, &g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
        *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= lr * m_hat / (v_hat.sqrt() + ADAM_EPSILON);
    }
    Ok(())
}

/// Multi-stage schedule settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub initial_lr: f64,
    /// Epochs without a new best MAE before the rate is halved.
    pub lr_halving_patience: usize,
    pub lr_floor: f64,
    /// Epochs without a new best MAE, counted within the current stage,
    /// before training stops.
    pub early_stop_patience: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            initial_lr: 0.05,
            lr_halving_patience: 10,
            lr_floor: 0.001,
            early_stop_patience: 30,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_floor > 0.0 && self.lr_floor <= self.initial_lr) {
            return Err(Error::InvalidArgument(
                "require 0 < lr_floor <= initial_lr".into(),
            ));
        }
        if self.lr_halving_patience == 0 || self.early_stop_patience == 0 {
            return Err(Error::InvalidArgument("patiences must be >= 1".into()));
        }
        Ok(())
    }
}

/// What the schedule decided after an epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EpochOutcome {
    pub improved: bool,
    pub stop: bool,
}

/// Plateau schedule. Each epoch's MAE either sets a new best (resetting
/// both counters) or counts as stale. After `lr_halving_patience` stale
/// epochs the rate halves, clamped at the floor, and a new stage starts
/// with its stale counter reset. Reaching `early_stop_patience` stale
/// epochs within a stage ends training; since stages above the floor are
/// shorter than that, stopping happens in the final stage.
#[derive(Debug, Clone, PartialEq)]
pub struct PlateauSchedule {
    config: ScheduleConfig,
    lr: f64,
    best: f64,
    stale: usize,
    stopped: bool,
}

impl PlateauSchedule {
    pub fn new(config: ScheduleConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            lr: config.initial_lr,
            best: f64::INFINITY,
            stale: 0,
            stopped: false,
        })
    }

    /// Rate for the next epoch.
    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    pub fn stopped(&self) -> bool {
        self.stopped
    }

    pub fn observe(&mut self, mae: f64) -> EpochOutcome {
        if mae < self.best {
            self.best = mae;
            self.stale = 0;
            return EpochOutcome {
                improved: true,
                stop: false,
            };
        }
        self.stale += 1;
        if self.stale >= self.config.early_stop_patience {
            self.stopped = true;
        } else if self.stale >= self.config.lr_halving_patience && self.lr > self.config.lr_floor {
            self.lr = (self.lr / 2.0).max(self.config.lr_floor);
            self.stale = 0;
        }
        EpochOutcome {
            improved: false,
            stop: self.stopped,
        }
    }
}
