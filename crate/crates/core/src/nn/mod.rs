//! Dense networks on `ndarray`, with explicit forward caches and backward passes.

mod activation;
mod adam;

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use activation::{
    relu, sigmoid, sigmoid_scaled, sigmoid_scaled_derivative, softplus, softplus_derivative, Activation,
};
pub use adam::AdamState;

/// `y = act(x W^T + b)` with `W` stored as `(out, in)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
}

impl DenseLayer {
    /// Glorot-uniform weights, zero bias.
    pub fn glorot<R: Rng + ?Sized>(input: usize, output: usize, activation: Activation, rng: &mut R) -> Self {
        let limit = (6.0 / (input + output) as f64).sqrt();
        let dist = Uniform::new_inclusive(-limit, limit).expect("finite limit");
        let weights = Array2::from_shape_fn((output, input), |_| dist.sample(rng));
        DenseLayer {
            weights,
            bias: Array1::zeros(output),
            activation,
        }
    }

    pub fn input_size(&self) -> usize {
        self.weights.ncols()
    }

    pub fn output_size(&self) -> usize {
        self.weights.nrows()
    }

    pub fn pre_activation(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.weights.t()) + &self.bias
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        let act = self.activation;
        self.pre_activation(x).mapv_into(|z| act.apply(z))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl LayerGrad {
    /// Gradients for a layer given the gradient with respect to its
    /// pre-activation and its input.
    pub fn from_delta(delta: &Array2<f64>, input: &Array2<f64>) -> Self {
        LayerGrad {
            weights: delta.t().dot(input),
            bias: delta.sum_axis(Axis(0)),
        }
    }
}

/// Dropout placement: after every hidden activation, and optionally after the
/// last layer too (used by encoders whose output is itself a hidden code).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<DenseLayer>,
    pub dropout: f64,
    pub dropout_on_output: bool,
    #[serde(skip)]
    generation: u64,
}

/// Intermediate values of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    generation: u64,
    inputs: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
    /// Multiplicative mask (training) or constant keep factor (inference) per layer.
    scales: Vec<Option<Array2<f64>>>,
    pub output: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrad {
    pub layers: Vec<LayerGrad>,
}

impl MlpGrad {
    pub fn slices(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|g| {
                [
                    g.weights.as_slice().expect("standard layout"),
                    g.bias.as_slice().expect("standard layout"),
                ]
            })
            .collect()
    }
}

impl Mlp {
    /// Builds a network with layer widths `sizes`; `activations` has one
    /// entry per layer.
    pub fn new<R: Rng + ?Sized>(
        sizes: &[usize],
        activations: &[Activation],
        dropout: f64,
        dropout_on_output: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if sizes.len() < 2 || activations.len() != sizes.len() - 1 {
            return Err(Error::structural("mlp needs n+1 sizes for n activations"));
        }
        if sizes.contains(&0) {
            return Err(Error::validation("mlp layer widths must be positive"));
        }
        if !(0.0..1.0).contains(&dropout) {
            return Err(Error::validation(format!("dropout rate {dropout} outside [0, 1)")));
        }
        let layers = sizes
            .windows(2)
            .zip(activations)
            .map(|(w, &act)| DenseLayer::glorot(w[0], w[1], act, rng))
            .collect();
        Ok(Mlp {
            layers,
            dropout,
            dropout_on_output,
            generation: 0,
        })
    }

    pub fn input_size(&self) -> usize {
        self.layers[0].input_size()
    }

    pub fn output_size(&self) -> usize {
        self.layers.last().map_or(0, DenseLayer::output_size)
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    fn has_dropout(&self, layer: usize) -> bool {
        self.dropout > 0.0 && (layer + 1 < self.layers.len() || self.dropout_on_output)
    }

    /// Forward pass. With `training`, dropout keeps each unit with
    /// probability `1 - p` (no rescaling); at inference activations are
    /// multiplied by `1 - p` instead.
    pub fn forward<R: Rng + ?Sized>(&self, x: &Array2<f64>, training: bool, rng: &mut R) -> Result<ForwardCache> {
        if x.ncols() != self.input_size() {
            return Err(Error::structural(format!(
                "mlp expects {} inputs, got {}",
                self.input_size(),
                x.ncols()
            )));
        }
        let n = self.layers.len();
        let mut inputs = Vec::with_capacity(n);
        let mut pre = Vec::with_capacity(n);
        let mut scales = Vec::with_capacity(n);
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let z = layer.pre_activation(&h);
            let act = layer.activation;
            let mut a = z.mapv(|v| act.apply(v));
            let scale = if self.has_dropout(i) {
                let s = if training {
                    let keep = 1.0 - self.dropout;
                    a.map(|_| if rng.random::<f64>() < keep { 1.0 } else { 0.0 })
                } else {
                    Array2::from_elem(a.raw_dim(), 1.0 - self.dropout)
                };
                a *= &s;
                Some(s)
            } else {
                None
            };
            inputs.push(std::mem::replace(&mut h, a));
            pre.push(z);
            scales.push(scale);
        }
        Ok(ForwardCache {
            generation: self.generation,
            inputs,
            pre,
            scales,
            output: h,
        })
    }

    /// Inference-mode output.
    pub fn predict(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        let mut h = x.clone();
        if x.ncols() != self.input_size() {
            return Err(Error::structural(format!(
                "mlp expects {} inputs, got {}",
                self.input_size(),
                x.ncols()
            )));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h);
            if self.has_dropout(i) {
                h *= 1.0 - self.dropout;
            }
        }
        Ok(h)
    }

    /// Returns parameter gradients and the gradient with respect to the input.
    pub fn backward(&self, cache: &ForwardCache, upstream: &Array2<f64>) -> Result<(MlpGrad, Array2<f64>)> {
        if cache.generation != self.generation || cache.pre.len() != self.layers.len() {
            return Err(Error::structural("forward cache is stale: parameters changed since it was produced"));
        }
        if upstream.dim() != cache.output.dim() {
            return Err(Error::structural(format!(
                "upstream gradient shape {:?} does not match output {:?}",
                upstream.dim(),
                cache.output.dim()
            )));
        }
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut d = upstream.clone();
        for i in (0..self.layers.len()).rev() {
            let layer = &self.layers[i];
            if let Some(s) = &cache.scales[i] {
                d *= s;
            }
            let act = layer.activation;
            ndarray::Zip::from(&mut d)
                .and(&cache.pre[i])
                .for_each(|g, &z| *g *= act.derivative(z));
            grads.push(LayerGrad::from_delta(&d, &cache.inputs[i]));
            d = d.dot(&layer.weights);
        }
        grads.reverse();
        Ok((MlpGrad { layers: grads }, d))
    }

    pub fn param_names(&self, prefix: &str) -> Vec<String> {
        (0..self.layers.len())
            .flat_map(|i| [format!("{prefix}layer{i}.weights"), format!("{prefix}layer{i}.bias")])
            .collect()
    }

    /// Mutable parameter views, ordered like [`MlpGrad::slices`]. Taking them
    /// invalidates outstanding forward caches.
    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.generation += 1;
        self.layers
            .iter_mut()
            .flat_map(|l| {
                [
                    l.weights.as_slice_mut().expect("standard layout"),
                    l.bias.as_slice_mut().expect("standard layout"),
                ]
            })
            .collect()
    }

    /// Shapes of the blocks returned by [`Mlp::param_slices`].
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        self.layers
            .iter()
            .flat_map(|l| [l.weights.shape().to_vec(), l.bias.shape().to_vec()])
            .collect()
    }

    pub fn param_slices(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| {
                [
                    l.weights.as_slice().expect("standard layout"),
                    l.bias.as_slice().expect("standard layout"),
                ]
            })
            .collect()
    }
}
