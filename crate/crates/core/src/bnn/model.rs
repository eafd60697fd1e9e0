//! Variational network, its weight noise, the ELBO and its exact
//! reparameterisation gradients.

use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::variational::{inverse_softplus, softplus, softplus_grad, GaussianVariational};
use crate::error::{Error, Result};
use crate::nn::{self, Activation, DenseLayer, LayerGrad, LayerRef, Trace};
use crate::seed::Rng;

/// Added to the head's softplus output so the predictive SD never reaches zero.
pub const SD_FLOOR: f64 = 1e-6;

/// Weight-noise estimator used during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    /// One weight sample shared by the whole batch.
    #[default]
    Reparameterization,
    /// Shared sample decorrelated per example by random sign flips.
    Flipout,
}

/// Affine map between label units (cycles) and model units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetScaling {
    pub mean: f64,
    pub sd: f64,
}

impl Default for TargetScaling {
    fn default() -> Self {
        Self { mean: 0.0, sd: 1.0 }
    }
}

impl TargetScaling {
    /// Mean and sample SD of the labels.
    pub fn fit(targets: &[f64]) -> Result<Self> {
        if targets.len() < 2 {
            return Err(Error::MissingData("target scaling needs >= 2 labels".into()));
        }
        let n = targets.len() as f64;
        let mean = targets.iter().sum::<f64>() / n;
        let sd = (targets.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        if !(sd > 0.0) {
            return Err(Error::Degenerate("all training labels are equal".into()));
        }
        Ok(Self { mean, sd })
    }

    pub fn to_model(&self, y: f64) -> f64 {
        (y - self.mean) / self.sd
    }

    pub fn to_cycles(&self, m: f64) -> f64 {
        self.mean + self.sd * m
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariationalDenseLayer {
    pub in_dim: usize,
    pub out_dim: usize,
    /// Row-major `out_dim × in_dim`.
    pub weights: GaussianVariational,
    pub biases: GaussianVariational,
    pub activation: Activation,
}

impl VariationalDenseLayer {
    pub fn init(in_dim: usize, out_dim: usize, init: &Init, rng: &mut Rng) -> Self {
        let mut draw = |n: usize| {
            GaussianVariational {
                mu: (0..n).map(|_| init.mu_dist().sample(rng)).collect(),
                rho: vec![init.rho; n],
            }
        };
        let weights = draw(in_dim * out_dim);
        let biases = draw(out_dim);
        Self {
            in_dim,
            out_dim,
            weights,
            biases,
            activation: Activation::Relu,
        }
    }

    fn check(&self) -> Result<()> {
        let w = self.in_dim * self.out_dim;
        for (expected, actual) in [
            (w, self.weights.mu.len()),
            (w, self.weights.rho.len()),
            (self.out_dim, self.biases.mu.len()),
            (self.out_dim, self.biases.rho.len()),
        ] {
            if expected != actual {
                return Err(Error::DimensionMismatch { expected, actual });
            }
        }
        Ok(())
    }
}

/// Initial distribution of the variational parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Init {
    /// SD of the zero-mean Gaussian initial `mu` (and head weights).
    pub mu_sd: f64,
    /// Constant initial `rho`.
    pub rho: f64,
}

impl Default for Init {
    fn default() -> Self {
        Self { mu_sd: 0.1, rho: -3.0 }
    }
}

impl Init {
    fn mu_dist(&self) -> Normal<f64> {
        Normal::new(0.0, self.mu_sd).expect("init sd must be finite and non-negative")
    }
}

pub(crate) fn init_dense(in_dim: usize, out_dim: usize, activation: Activation, init: &Init, rng: &mut Rng) -> DenseLayer {
    let dist = init.mu_dist();
    DenseLayer {
        in_dim,
        out_dim,
        weights: (0..in_dim * out_dim).map(|_| dist.sample(rng)).collect(),
        biases: (0..out_dim).map(|_| dist.sample(rng)).collect(),
        activation,
    }
}

/// Variational hidden stack with a deterministic two-output Gaussian head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BnnModel {
    pub input_dim: usize,
    pub hidden: Vec<VariationalDenseLayer>,
    /// Outputs `(raw_mean, raw_sd)`.
    pub head: DenseLayer,
    pub target: TargetScaling,
    pub estimator: Estimator,
}

/// Gaussian predictive parameters in cycles.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub mean: f64,
    pub sd: f64,
}

/// Named slice of the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamBlock {
    pub name: String,
    pub offset: usize,
    pub len: usize,
    pub kind: ParamKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Mu,
    Rho,
    Head,
}

/// Standard-normal draws behind one realisation of the weights.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNoise {
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
    /// Per-example `(input_signs, output_signs)` for Flipout.
    pub flips: Option<Vec<(Vec<f64>, Vec<f64>)>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightNoise {
    pub layers: Vec<LayerNoise>,
}

/// Inputs in feature space (standardised) with labels in cycles.
#[derive(Debug, Clone, Copy)]
pub struct Batch<'a> {
    pub inputs: &'a [Vec<f64>],
    pub targets: &'a [f64],
}

impl<'a> Batch<'a> {
    pub fn new(inputs: &'a [Vec<f64>], targets: &'a [f64]) -> Result<Self> {
        if inputs.is_empty() {
            return Err(Error::MissingData("batch is empty".into()));
        }
        if inputs.len() != targets.len() {
            return Err(Error::DimensionMismatch {
                expected: inputs.len(),
                actual: targets.len(),
            });
        }
        Ok(Self { inputs, targets })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

/// Loss and its gradient, aligned with [`BnnModel::flat_params`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub loss: f64,
    pub flat: Vec<f64>,
}

fn sign(rng: &mut Rng) -> f64 {
    if rng.gen::<bool>() {
        1.0
    } else {
        -1.0
    }
}

fn normals(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

impl BnnModel {
    /// Fresh model with `mu ~ N(0, init.mu_sd²)` and `rho = init.rho`.
    pub fn new(input_dim: usize, hidden_dims: &[usize], init: &Init, rng: &mut Rng) -> Self {
        let mut hidden = Vec::with_capacity(hidden_dims.len());
        let mut width = input_dim;
        for &h in hidden_dims {
            hidden.push(VariationalDenseLayer::init(width, h, init, rng));
            width = h;
        }
        let head = init_dense(width, 2, Activation::Identity, init, rng);
        Self {
            input_dim,
            hidden,
            head,
            target: TargetScaling::default(),
            estimator: Estimator::default(),
        }
    }

    pub fn hidden_dims(&self) -> Vec<usize> {
        self.hidden.iter().map(|l| l.out_dim).collect()
    }

    /// Checks the shapes of every layer.
    pub fn validate(&self) -> Result<()> {
        let mut width = self.input_dim;
        for layer in &self.hidden {
            if layer.in_dim != width {
                return Err(Error::DimensionMismatch {
                    expected: width,
                    actual: layer.in_dim,
                });
            }
            layer.check()?;
            width = layer.out_dim;
        }
        if self.head.in_dim != width {
            return Err(Error::DimensionMismatch {
                expected: width,
                actual: self.head.in_dim,
            });
        }
        if self.head.out_dim != 2 {
            return Err(Error::DimensionMismatch {
                expected: 2,
                actual: self.head.out_dim,
            });
        }
        for (expected, actual) in [
            (self.head.in_dim * 2, self.head.weights.len()),
            (2, self.head.biases.len()),
        ] {
            if expected != actual {
                return Err(Error::DimensionMismatch { expected, actual });
            }
        }
        if !(self.target.sd > 0.0) {
            return Err(Error::InvalidArgument("target scale must be positive".into()));
        }
        Ok(())
    }

    /// Total KL divergence of all variational parameters from the prior.
    pub fn kl(&self) -> f64 {
        self.hidden
            .iter()
            .map(|l| l.weights.kl() + l.biases.kl())
            .sum()
    }

    /// Parameter layout: per hidden layer `w.mu, w.rho, b.mu, b.rho`, then
    /// head weights and biases.
    pub fn param_layout(&self) -> Vec<ParamBlock> {
        let mut blocks = Vec::new();
        let mut offset = 0;
        let mut push = |name: String, len: usize, kind: ParamKind| {
            blocks.push(ParamBlock {
                name,
                offset,
                len,
                kind,
            });
            offset += len;
        };
        for (i, l) in self.hidden.iter().enumerate() {
            push(format!("hidden{i}.w.mu"), l.weights.len(), ParamKind::Mu);
            push(format!("hidden{i}.w.rho"), l.weights.len(), ParamKind::Rho);
            push(format!("hidden{i}.b.mu"), l.biases.len(), ParamKind::Mu);
            push(format!("hidden{i}.b.rho"), l.biases.len(), ParamKind::Rho);
        }
        push("head.w".into(), self.head.weights.len(), ParamKind::Head);
        push("head.b".into(), self.head.biases.len(), ParamKind::Head);
        blocks
    }

    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.hidden {
            out.extend(&l.weights.mu);
            out.extend(&l.weights.rho);
            out.extend(&l.biases.mu);
            out.extend(&l.biases.rho);
        }
        out.extend(&self.head.weights);
        out.extend(&self.head.biases);
        out
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        let total = self.param_layout().iter().map(|b| b.len).sum::<usize>();
        if flat.len() != total {
            return Err(Error::DimensionMismatch {
                expected: total,
                actual: flat.len(),
            });
        }
        let mut rest = flat;
        let mut take = |dst: &mut Vec<f64>| {
            let (head, tail) = rest.split_at(dst.len());
            dst.copy_from_slice(head);
            rest = tail;
        };
        for l in &mut self.hidden {
            take(&mut l.weights.mu);
            take(&mut l.weights.rho);
            take(&mut l.biases.mu);
            take(&mut l.biases.rho);
        }
        take(&mut self.head.weights);
        take(&mut self.head.biases);
        Ok(())
    }

    /// Sets every `rho` to the same value.
    pub fn set_all_rho(&mut self, rho: f64) {
        for l in &mut self.hidden {
            l.weights.rho.fill(rho);
            l.biases.rho.fill(rho);
        }
    }

    /// Sets every posterior SD, via `rho = softplus⁻¹(sigma)`.
    pub fn set_all_sigma(&mut self, sigma: f64) {
        self.set_all_rho(inverse_softplus(sigma));
    }

    /// Draws weight noise for a batch of `batch_len` examples.
    pub fn sample_noise(&self, batch_len: usize, rng: &mut Rng) -> WeightNoise {
        WeightNoise {
            layers: self
                .hidden
                .iter()
                .map(|l| {
                    let weights = normals(rng, l.weights.len());
                    let biases = normals(rng, l.biases.len());
                    let flips = (self.estimator == Estimator::Flipout).then(|| {
                        (0..batch_len)
                            .map(|_| {
                                let input = (0..l.in_dim).map(|_| sign(rng)).collect();
                                let output = (0..l.out_dim).map(|_| sign(rng)).collect();
                                (input, output)
                            })
                            .collect()
                    });
                    LayerNoise {
                        weights,
                        biases,
                        flips,
                    }
                })
                .collect(),
        }
    }

    /// Noise that realises every weight at its posterior mean.
    pub fn zero_noise(&self) -> WeightNoise {
        WeightNoise {
            layers: self
                .hidden
                .iter()
                .map(|l| LayerNoise {
                    weights: vec![0.0; l.weights.len()],
                    biases: vec![0.0; l.biases.len()],
                    flips: None,
                })
                .collect(),
        }
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

    fn check_noise(&self, noise: &WeightNoise, batch_len: usize) -> Result<()> {
        if noise.layers.len() != self.hidden.len() {
            return Err(Error::DimensionMismatch {
                expected: self.hidden.len(),
                actual: noise.layers.len(),
            });
        }
        for (l, n) in self.hidden.iter().zip(&noise.layers) {
            if n.weights.len() != l.weights.len() || n.biases.len() != l.biases.len() {
                return Err(Error::DimensionMismatch {
                    expected: l.weights.len(),
                    actual: n.weights.len(),
                });
            }
            if let Some(flips) = &n.flips {
                if flips.len() < batch_len {
                    return Err(Error::DimensionMismatch {
                        expected: batch_len,
                        actual: flips.len(),
                    });
                }
            }
        }
        Ok(())
    }

    fn realize(&self, noise: &WeightNoise) -> Vec<Realized> {
        self.hidden
            .iter()
            .zip(&noise.layers)
            .map(|(l, n)| {
                let delta: Vec<f64> = l
                    .weights
                    .sigma()
                    .zip(&n.weights)
                    .map(|(s, e)| s * e)
                    .collect();
                let shared = l.weights.mu.iter().zip(&delta).map(|(m, d)| m + d).collect();
                Realized {
                    delta,
                    shared,
                    biases: l.biases.realize(&n.biases),
                }
            })
            .collect()
    }

    /// Per-example weight matrices: shared, or sign-flipped for Flipout.
    fn example_weights(&self, realized: &[Realized], noise: &WeightNoise, example: usize) -> Vec<Option<Vec<f64>>> {
        self.hidden
            .iter()
            .zip(realized)
            .zip(&noise.layers)
            .map(|((l, r), n)| {
                n.flips.as_ref().map(|flips| {
                    let (input, output) = &flips[example];
                    let mut w = l.weights.mu.clone();
                    for o in 0..l.out_dim {
                        for i in 0..l.in_dim {
                            let k = o * l.in_dim + i;
                            w[k] += r.delta[k] * output[o] * input[i];
                        }
                    }
                    w
                })
            })
            .collect()
    }

    fn layer_refs<'a>(&'a self, realized: &'a [Realized], flipped: &'a [Option<Vec<f64>>]) -> Vec<LayerRef<'a>> {
        let mut refs: Vec<LayerRef<'a>> = self
            .hidden
            .iter()
            .zip(realized)
            .zip(flipped)
            .map(|((l, r), f)| LayerRef {
                weights: f.as_deref().unwrap_or(&r.shared),
                biases: &r.biases,
                in_dim: l.in_dim,
                out_dim: l.out_dim,
                activation: l.activation,
            })
            .collect();
        refs.push(self.head.as_ref());
        refs
    }

    /// Head outputs `(mean, sd)` in model units for one example.
    pub fn forward_model_units(&self, x: &[f64], noise: &WeightNoise, example: usize) -> Result<(f64, f64)> {
        self.check_input(x)?;
        self.check_noise(noise, example + 1)?;
        let realized = self.realize(noise);
        let flipped = self.example_weights(&realized, noise, example);
        let out = nn::forward(&self.layer_refs(&realized, &flipped), x);
        Ok((out[0], softplus(out[1]) + SD_FLOOR))
    }

    /// Predictive Gaussian in cycles under the given weight noise.
    pub fn predict_with(&self, x: &[f64], noise: &WeightNoise) -> Result<Prediction> {
        let (m, s) = self.forward_model_units(x, noise, 0)?;
        Ok(Prediction {
            mean: self.target.to_cycles(m),
            sd: self.target.sd * s,
        })
    }

    /// Prediction with every weight at its posterior mean.
    pub fn deterministic(&self, x: &[f64]) -> Result<Prediction> {
        self.predict_with(x, &self.zero_noise())
    }
}

struct Realized {
    delta: Vec<f64>,
    shared: Vec<f64>,
    biases: Vec<f64>,
}

/// One reparameterised pass: fresh weight noise from `rng`, predictive
/// `(mean, sd)` in cycles.
pub fn sample_forward(model: &BnnModel, x: &[f64], rng: &mut Rng) -> Result<(f64, f64)> {
    let noise = model.sample_noise(1, rng);
    let p = model.predict_with(x, &noise)?;
    Ok((p.mean, p.sd))
}

/// Negative log density of `y` under `N(mean, sd²)`.
pub fn gaussian_nll(y: f64, mean: f64, sd: f64) -> Result<f64> {
    if !(sd > 0.0) {
        return Err(Error::InvalidArgument(format!("sd must be positive, got {sd}")));
    }
    Ok(nll_unchecked(y, mean, sd))
}

#[inline]
fn nll_unchecked(y: f64, mean: f64, sd: f64) -> f64 {
    let r = y - mean;
    0.5 * (2.0 * std::f64::consts::PI * sd * sd).ln() + r * r / (2.0 * sd * sd)
}

/// Mean NLL under one shared weight sample plus `KL / n_train`.
pub fn elbo_loss(model: &BnnModel, batch: &Batch<'_>, noise: &WeightNoise, n_train: usize) -> Result<f64> {
    if n_train == 0 {
        return Err(Error::InvalidArgument("n_train must be positive".into()));
    }
    elbo_loss_weighted(model, batch, noise, 1.0 / n_train as f64)
}

/// Mean NLL plus `kl_weight × KL`. Labels are taken in cycles and scaled
/// into model units first.
pub fn elbo_loss_weighted(model: &BnnModel, batch: &Batch<'_>, noise: &WeightNoise, kl_weight: f64) -> Result<f64> {
    model.check_noise(noise, batch.len())?;
    let realized = model.realize(noise);
    let mut nll = 0.0;
    for (n, (x, &y)) in batch.inputs.iter().zip(batch.targets).enumerate() {
        model.check_input(x)?;
        let flipped = model.example_weights(&realized, noise, n);
        let out = nn::forward(&model.layer_refs(&realized, &flipped), x);
        let sd = softplus(out[1]) + SD_FLOOR;
        nll += nll_unchecked(model.target.to_model(y), out[0], sd);
    }
    Ok(nll / batch.len() as f64 + kl_weight * model.kl())
}

/// Exact gradient of [`elbo_loss_weighted`] with the noise held fixed.
pub fn gradients(model: &BnnModel, batch: &Batch<'_>, noise: &WeightNoise, kl_weight: f64) -> Result<Gradients> {
    model.check_noise(noise, batch.len())?;
    let realized = model.realize(noise);
    let n_layers = model.hidden.len();

    // ∂NLL/∂W for the realised weights, split into the mean path and the
    // perturbation path (identical without Flipout).
    let mut g_mu: Vec<LayerGrad> = Vec::with_capacity(n_layers + 1);
    let mut g_delta: Vec<Vec<f64>> = Vec::with_capacity(n_layers);
    for l in &model.hidden {
        g_mu.push(LayerGrad {
            weights: vec![0.0; l.weights.len()],
            biases: vec![0.0; l.biases.len()],
        });
        g_delta.push(vec![0.0; l.weights.len()]);
    }
    g_mu.push(LayerGrad::zeros_like(&model.head.as_ref()));
    let any_flip = noise.layers.iter().any(|n| n.flips.is_some());
    let mut scratch: Vec<LayerGrad> = g_mu.clone();
    let mut trace = Trace::default();
    let mut nll = 0.0;

    for (n, (x, &y)) in batch.inputs.iter().zip(batch.targets).enumerate() {
        model.check_input(x)?;
        let flipped = model.example_weights(&realized, noise, n);
        let refs = model.layer_refs(&realized, &flipped);
        let out = nn::forward_trace(&refs, x, &mut trace);
        let target = model.target.to_model(y);
        let sd = softplus(out[1]) + SD_FLOOR;
        let r = target - out[0];
        nll += nll_unchecked(target, out[0], sd);
        let d_mean = -r / (sd * sd);
        let d_sd = 1.0 / sd - r * r / (sd * sd * sd);
        let grad_out = [d_mean, d_sd * softplus_grad(out[1])];

        if any_flip {
            scratch.iter_mut().for_each(LayerGrad::clear);
            nn::backward(&refs, &trace, &grad_out, &mut scratch);
            for l in 0..n_layers {
                let layer = &model.hidden[l];
                let sw = &scratch[l].weights;
                add_into(&mut g_mu[l].weights, sw);
                add_into(&mut g_mu[l].biases, &scratch[l].biases);
                match &noise.layers[l].flips {
                    Some(flips) => {
                        let (input, output) = &flips[n];
                        for o in 0..layer.out_dim {
                            for i in 0..layer.in_dim {
                                let k = o * layer.in_dim + i;
                                g_delta[l][k] += sw[k] * output[o] * input[i];
                            }
                        }
                    }
                    None => add_into(&mut g_delta[l], sw),
                }
            }
            let head = n_layers;
            let (dst, src) = (&mut g_mu[head], &scratch[head]);
            add_into(&mut dst.weights, &src.weights);
            add_into(&mut dst.biases, &src.biases);
        } else {
            nn::backward(&refs, &trace, &grad_out, &mut g_mu);
        }
    }
    if !any_flip {
        for l in 0..n_layers {
            g_delta[l].copy_from_slice(&g_mu[l].weights);
        }
    }

    let inv_b = 1.0 / batch.len() as f64;
    let mut flat = Vec::new();
    for (l, layer) in model.hidden.iter().enumerate() {
        let eps = &noise.layers[l];
        let w = &layer.weights;
        flat.extend(
            g_mu[l]
                .weights
                .iter()
                .zip(&w.mu)
                .map(|(g, &m)| g * inv_b + kl_weight * m),
        );
        flat.extend(w.rho.iter().enumerate().map(|(k, &rho)| {
            let s = softplus(rho);
            let ds = softplus_grad(rho);
            g_delta[l][k] * inv_b * eps.weights[k] * ds + kl_weight * (s - 1.0 / s) * ds
        }));
        let b = &layer.biases;
        flat.extend(
            g_mu[l]
                .biases
                .iter()
                .zip(&b.mu)
                .map(|(g, &m)| g * inv_b + kl_weight * m),
        );
        flat.extend(b.rho.iter().enumerate().map(|(k, &rho)| {
            let s = softplus(rho);
            let ds = softplus_grad(rho);
            g_mu[l].biases[k] * inv_b * eps.biases[k] * ds + kl_weight * (s - 1.0 / s) * ds
        }));
    }
    let head = &g_mu[n_layers];
    flat.extend(head.weights.iter().map(|g| g * inv_b));
    flat.extend(head.biases.iter().map(|g| g * inv_b));

    Ok(Gradients {
        loss: nll * inv_b + kl_weight * model.kl(),
        flat,
    })
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
