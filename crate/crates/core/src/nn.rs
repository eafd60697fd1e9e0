//! Dense-layer forward and reverse passes over concrete weight matrices.
//!
//! Both the variational network (after realising its weights) and the point
//! network baseline run through these routines, so the backward pass is
//! written once.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Identity => z,
        }
    }

    #[inline]
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// Deterministic dense layer, weights row-major `out_dim × in_dim`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn zeros(in_dim: usize, out_dim: usize, activation: Activation) -> Self {
        Self {
            in_dim,
            out_dim,
            weights: vec![0.0; in_dim * out_dim],
            biases: vec![0.0; out_dim],
            activation,
        }
    }

    pub fn as_ref(&self) -> LayerRef<'_> {
        LayerRef {
            weights: &self.weights,
            biases: &self.biases,
            in_dim: self.in_dim,
            out_dim: self.out_dim,
            activation: self.activation,
        }
    }
}

/// Borrowed concrete weights of one layer.
#[derive(Debug, Clone, Copy)]
pub struct LayerRef<'a> {
    pub weights: &'a [f64],
    pub biases: &'a [f64],
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
}

/// Gradient buffers matching one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl LayerGrad {
    pub fn zeros_like(layer: &LayerRef<'_>) -> Self {
        Self {
            weights: vec![0.0; layer.weights.len()],
            biases: vec![0.0; layer.biases.len()],
        }
    }

    pub fn clear(&mut self) {
        self.weights.fill(0.0);
        self.biases.fill(0.0);
    }
}

/// Inputs and pre-activations recorded during a forward pass.
#[derive(Debug, Clone, Default)]
pub struct Trace {
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
}

pub fn affine(layer: &LayerRef<'_>, x: &[f64], out: &mut Vec<f64>) {
    out.clear();
    out.extend(layer.biases.iter().enumerate().map(|(o, &b)| {
        let row = &layer.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
        b + row.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>()
    }));
}

/// Output of the stack without recording intermediates.
pub fn forward(layers: &[LayerRef<'_>], x: &[f64]) -> Vec<f64> {
    let mut a = x.to_vec();
    let mut z = Vec::new();
    for layer in layers {
        affine(layer, &a, &mut z);
        a.clear();
        a.extend(z.iter().map(|&v| layer.activation.apply(v)));
    }
    a
}

pub fn forward_trace(layers: &[LayerRef<'_>], x: &[f64], trace: &mut Trace) -> Vec<f64> {
    trace.inputs.clear();
    trace.pre.clear();
    let mut a = x.to_vec();
    for layer in layers {
        let mut z = Vec::with_capacity(layer.out_dim);
        affine(layer, &a, &mut z);
        let next = z.iter().map(|&v| layer.activation.apply(v)).collect();
        trace.inputs.push(std::mem::replace(&mut a, next));
        trace.pre.push(z);
    }
    a
}

/// Accumulates `∂L/∂W` and `∂L/∂b` for every layer given `∂L/∂output`,
/// returning `∂L/∂x`.
pub fn backward(
    layers: &[LayerRef<'_>],
    trace: &Trace,
    grad_out: &[f64],
    grads: &mut [LayerGrad],
) -> Vec<f64> {
    let mut upstream = grad_out.to_vec();
    for (l, layer) in layers.iter().enumerate().rev() {
        let z = &trace.pre[l];
        let x = &trace.inputs[l];
        let delta: Vec<f64> = upstream
            .iter()
            .zip(z)
            .map(|(g, &zi)| g * layer.activation.derivative(zi))
            .collect();
        let g = &mut grads[l];
        let mut down = vec![0.0; layer.in_dim];
        for (o, &d) in delta.iter().enumerate() {
            g.biases[o] += d;
            if d == 0.0 {
                continue;
            }
            let row = o * layer.in_dim..(o + 1) * layer.in_dim;
            for ((gw, &xi), (&w, dx)) in g.weights[row.clone()]
                .iter_mut()
                .zip(x)
                .zip(layer.weights[row].iter().zip(down.iter_mut()))
            {
                *gw += d * xi;
                *dx += d * w;
            }
        }
        upstream = down;
    }
    upstream
}
