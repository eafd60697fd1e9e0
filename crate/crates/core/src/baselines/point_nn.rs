use serde::{Deserialize, Serialize};

use crate::bnn::model::init_dense;
use crate::bnn::{softplus, softplus_grad, TargetScaling, TrainConfig, SD_FLOOR};
use crate::bnn::train::{STREAM_INIT, STREAM_NOISE, STREAM_SHUFFLE};
use crate::error::{Error, Result};
use crate::nn::{self, Activation, DenseLayer, LayerGrad, LayerRef, Trace};
use crate::seed::{substream, Rng};
use crate::training::{fit, Trainable, TrainingHistory};

/// Objective of the deterministic network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PointLoss {
    /// Scalar output, mean squared error.
    #[default]
    Mse,
    /// Two outputs read as mean and softplus SD, Gaussian NLL.
    GaussianNll,
}

impl PointLoss {
    fn outputs(self) -> usize {
        match self {
            PointLoss::Mse => 1,
            PointLoss::GaussianNll => 2,
        }
    }
}

/// Same layer stack as the variational network with point weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointNnModel {
    pub input_dim: usize,
    /// Hidden ReLU layers followed by the linear head.
    pub layers: Vec<DenseLayer>,
    pub target: TargetScaling,
    pub loss: PointLoss,
}

impl PointNnModel {
    /// Initialised with the same draw order as the variational network's
    /// means for the same configuration.
    pub fn new(input_dim: usize, config: &TrainConfig, loss: PointLoss) -> Self {
        let mut rng = substream(config.seed, STREAM_INIT);
        let mut layers = Vec::with_capacity(config.hidden_dims.len() + 1);
        let mut width = input_dim;
        for &h in &config.hidden_dims {
            layers.push(init_dense(width, h, Activation::Relu, &config.init, &mut rng));
            width = h;
        }
        layers.push(init_dense(width, loss.outputs(), Activation::Identity, &config.init, &mut rng));
        Self {
            input_dim,
            layers,
            target: TargetScaling::default(),
            loss,
        }
    }

    fn refs(&self) -> Vec<LayerRef<'_>> {
        self.layers.iter().map(DenseLayer::as_ref).collect()
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim,
                actual: x.len(),
            });
        }
        Ok(())
    }

    /// Predicted EoL in cycles.
    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        self.check_input(x)?;
        let out = nn::forward(&self.refs(), x);
        Ok(self.target.to_cycles(out[0]))
    }

    pub fn flat_params(&self) -> Vec<f64> {
        let mut flat = Vec::new();
        for l in &self.layers {
            flat.extend_from_slice(&l.weights);
            flat.extend_from_slice(&l.biases);
        }
        flat
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        let total: usize = self.layers.iter().map(|l| l.weights.len() + l.biases.len()).sum();
        if flat.len() != total {
            return Err(Error::DimensionMismatch {
                expected: total,
                actual: flat.len(),
            });
        }
        let mut at = 0;
        for l in &mut self.layers {
            let n = l.weights.len();
            l.weights.copy_from_slice(&flat[at..at + n]);
            at += n;
            let n = l.biases.len();
            l.biases.copy_from_slice(&flat[at..at + n]);
            at += n;
        }
        Ok(())
    }

    /// Mean loss over the batch (targets in cycles) and its gradient.
    pub fn loss_and_grad(&self, inputs: &[Vec<f64>], targets: &[f64]) -> Result<(f64, Vec<f64>)> {
        if inputs.is_empty() {
            return Err(Error::MissingData("batch is empty".into()));
        }
        if inputs.len() != targets.len() {
            return Err(Error::DimensionMismatch {
                expected: inputs.len(),
                actual: targets.len(),
            });
        }
        let refs = self.refs();
        let mut grads: Vec<LayerGrad> = refs.iter().map(LayerGrad::zeros_like).collect();
        let mut trace = Trace::default();
        let mut loss = 0.0;
        for (x, &y) in inputs.iter().zip(targets) {
            self.check_input(x)?;
            let out = nn::forward_trace(&refs, x, &mut trace);
            let t = self.target.to_model(y);
            let r = t - out[0];
            let grad_out = match self.loss {
                PointLoss::Mse => {
                    loss += r * r;
                    vec![-2.0 * r]
                }
                PointLoss::GaussianNll => {
                    let sd = softplus(out[1]) + SD_FLOOR;
                    loss += 0.5 * (2.0 * std::f64::consts::PI * sd * sd).ln() + r * r / (2.0 * sd * sd);
                    let d_sd = 1.0 / sd - r * r / (sd * sd * sd);
                    vec![-r / (sd * sd), d_sd * softplus_grad(out[1])]
                }
            };
            nn::backward(&refs, &trace, &grad_out, &mut grads);
        }
        let inv = 1.0 / inputs.len() as f64;
        let mut flat = Vec::new();
        for g in &grads {
            flat.extend(g.weights.iter().map(|v| v * inv));
            flat.extend(g.biases.iter().map(|v| v * inv));
        }
        Ok((loss * inv, flat))
    }
}

impl Trainable for PointNnModel {
    fn flat_params(&self) -> Vec<f64> {
        PointNnModel::flat_params(self)
    }

    fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        PointNnModel::set_flat_params(self, flat)
    }

    fn loss_and_grad(&self, inputs: &[Vec<f64>], targets: &[f64], _rng: &mut Rng) -> Result<(f64, Vec<f64>)> {
        PointNnModel::loss_and_grad(self, inputs, targets)
    }

    fn point_prediction(&self, x: &[f64]) -> Result<f64> {
        self.predict(x)
    }
}

/// Trains the deterministic network under the same schedule, seed layout
/// and architecture as the variational network. `kl_weight_mode`,
/// `estimator` and `learn_sigma` are ignored.
pub fn train_point_nn(
    inputs: &[Vec<f64>],
    targets: &[f64],
    config: &TrainConfig,
    loss: PointLoss,
) -> Result<(PointNnModel, TrainingHistory)> {
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
    let mut model = PointNnModel::new(inputs[0].len(), config, loss);
    model.target = TargetScaling::fit(targets)?;
    let mut shuffle = substream(config.seed, STREAM_SHUFFLE);
    let mut noise = substream(config.seed, STREAM_NOISE);
    fit(model, inputs, targets, &config.loop_config(), &mut shuffle, &mut noise)
}
