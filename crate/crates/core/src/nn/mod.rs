//! Dense networks with hand-written reverse-mode gradients, Adam and polyak
//! averaging. Everything is `f64` and runs in a fixed order, so identical
//! inputs give bit-identical outputs.

mod adam;
mod tensor;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use adam::{adam_update, AdamState, AdamVec, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use tensor::Tensor2;
use tensor::{axpy, dot};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("invalid layer sizes: {0}")]
    InvalidLayers(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Linear,
}

impl Activation {
    fn apply(self, v: &mut [f64]) {
        if self == Activation::Tanh {
            for x in v {
                *x = x.tanh();
            }
        }
    }
}

/// One affine layer: `y = W x + b`, with `W` shaped `(out, in)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weight: Tensor2,
    pub bias: Vec<f64>,
}

impl Dense {
    fn zeros_like(&self) -> Self {
        Self {
            weight: Tensor2::zeros(self.weight.rows(), self.weight.cols()),
            bias: vec![0.0; self.bias.len()],
        }
    }

    fn values(&self) -> impl Iterator<Item = &f64> {
        self.weight.data().iter().chain(&self.bias)
    }
}

/// Multi-layer perceptron with tanh hidden units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    layer_sizes: Vec<usize>,
    output_activation: Activation,
    layers: Vec<Dense>,
}

/// Gradients with the same layout as an [`Mlp`]'s parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpGrads {
    pub layers: Vec<Dense>,
}

impl MlpGrads {
    pub fn flatten(&self) -> Vec<f64> {
        self.layers.iter().flat_map(|l| l.values().copied()).collect()
    }

    pub fn scale(&mut self, k: f64) {
        for l in &mut self.layers {
            l.weight.data_mut().iter_mut().for_each(|v| *v *= k);
            l.bias.iter_mut().for_each(|v| *v *= k);
        }
    }

    pub fn is_zero(&self) -> bool {
        self.layers.iter().all(|l| l.values().all(|&v| v == 0.0))
    }
}

/// Activations saved by [`Mlp::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// `activations[0]` is the input, `activations[l + 1]` the output of layer `l`.
    activations: Vec<Tensor2>,
}

impl ForwardCache {
    pub fn output(&self) -> &Tensor2 {
        self.activations.last().expect("cache holds at least the input")
    }
}

impl Mlp {
    /// Glorot-uniform weights and zero biases from a seeded generator.
    pub fn new(layer_sizes: &[usize], output_activation: Activation, seed: u64) -> Result<Self, NetError> {
        if layer_sizes.len() < 2 {
            return Err(NetError::InvalidLayers(format!(
                "need at least an input and an output size, got {layer_sizes:?}"
            )));
        }
        if layer_sizes.contains(&0) {
            return Err(NetError::InvalidLayers(format!("zero-width layer in {layer_sizes:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = layer_sizes
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let data = (0..fan_in * fan_out).map(|_| rng.random_range(-limit..limit)).collect();
                Dense {
                    weight: Tensor2::from_vec(fan_out, fan_in, data).expect("sized above"),
                    bias: vec![0.0; fan_out],
                }
            })
            .collect();
        Ok(Self {
            layer_sizes: layer_sizes.to_vec(),
            output_activation,
            layers,
        })
    }

    /// Builds a network from explicit layers, checking shapes and values.
    pub fn from_layers(layers: Vec<Dense>, output_activation: Activation) -> Result<Self, NetError> {
        if layers.is_empty() {
            return Err(NetError::InvalidLayers("no layers".into()));
        }
        let mut sizes = vec![layers[0].weight.cols()];
        sizes.extend(layers.iter().map(|l| l.weight.rows()));
        let net = Self {
            layer_sizes: sizes,
            output_activation,
            layers,
        };
        net.validate()?;
        Ok(net)
    }

    /// Checks the shape and finiteness invariants, e.g. after deserializing.
    pub fn validate(&self) -> Result<(), NetError> {
        if self.layer_sizes.len() != self.layers.len() + 1 || self.layers.is_empty() {
            return Err(NetError::InvalidLayers(format!(
                "{} layer sizes for {} layers",
                self.layer_sizes.len(),
                self.layers.len()
            )));
        }
        for (l, layer) in self.layers.iter().enumerate() {
            let (rows, cols) = layer.weight.shape();
            let want = (self.layer_sizes[l + 1], self.layer_sizes[l]);
            if (rows, cols) != want || layer.weight.data().len() != rows * cols {
                return Err(NetError::Shape(format!(
                    "layers[{l}].weight is {rows}x{cols} with {} values, expected {}x{}",
                    layer.weight.data().len(),
                    want.0,
                    want.1
                )));
            }
            if layer.bias.len() != rows {
                return Err(NetError::Shape(format!(
                    "layers[{l}].bias has {} values, expected {rows}",
                    layer.bias.len()
                )));
            }
            if !layer.values().all(|v| v.is_finite()) {
                return Err(NetError::NonFinite(format!("layers[{l}]")));
            }
        }
        Ok(())
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn input_size(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_size(&self) -> usize {
        *self.layer_sizes.last().expect("at least two sizes")
    }

    pub fn output_activation(&self) -> Activation {
        self.output_activation
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn zero_grads(&self) -> MlpGrads {
        MlpGrads {
            layers: self.layers.iter().map(Dense::zeros_like).collect(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.data().len() + l.bias.len()).sum()
    }

    pub fn flat_params(&self) -> Vec<f64> {
        self.layers.iter().flat_map(|l| l.values().copied()).collect()
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<(), NetError> {
        if flat.len() != self.param_count() {
            return Err(NetError::Shape(format!(
                "{} flat values for {} parameters",
                flat.len(),
                self.param_count()
            )));
        }
        let mut it = flat.iter().copied();
        for l in &mut self.layers {
            for v in l.weight.data_mut().iter_mut().chain(l.bias.iter_mut()) {
                *v = it.next().expect("length checked");
            }
        }
        Ok(())
    }

    fn same_shape(&self, other: &Mlp) -> bool {
        self.layer_sizes == other.layer_sizes
    }

    /// Forward pass over a batch (one sample per row).
    pub fn forward(&self, input: &Tensor2) -> Result<ForwardCache, NetError> {
        if input.cols() != self.input_size() {
            return Err(NetError::Shape(format!(
                "input has {} columns, network expects {}",
                input.cols(),
                self.input_size()
            )));
        }
        let last = self.layers.len() - 1;
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(input.clone());
        for (l, layer) in self.layers.iter().enumerate() {
            let x = activations.last().expect("non-empty");
            let out_dim = layer.weight.rows();
            let mut y = Tensor2::zeros(x.rows(), out_dim);
            for b in 0..x.rows() {
                let xr = x.row(b);
                let yr = y.row_mut(b);
                for (o, v) in yr.iter_mut().enumerate() {
                    *v = dot(layer.weight.row(o), xr) + layer.bias[o];
                }
                let act = if l == last {
                    self.output_activation
                } else {
                    Activation::Tanh
                };
                act.apply(yr);
            }
            activations.push(y);
        }
        Ok(ForwardCache { activations })
    }

    /// Convenience wrapper returning only the output.
    pub fn predict(&self, input: &Tensor2) -> Result<Tensor2, NetError> {
        let mut cache = self.forward(input)?;
        Ok(cache.activations.pop().expect("non-empty"))
    }

    /// Forward pass for a single sample.
    pub fn predict_one(&self, input: &[f64]) -> Result<Vec<f64>, NetError> {
        let x = Tensor2::from_vec(1, input.len(), input.to_vec())?;
        Ok(self.predict(&x)?.into_data())
    }

    /// Reverse-mode pass. `output_grad` is dL/d(output) for every sample;
    /// returns parameter gradients (summed over the batch) and dL/d(input).
    pub fn backward(&self, cache: &ForwardCache, output_grad: &Tensor2) -> Result<(MlpGrads, Tensor2), NetError> {
        self.backward_impl(cache, output_grad, true)
    }

    /// Like [`Mlp::backward`] but skips dL/d(input); the returned parameter
    /// gradients are identical.
    pub fn param_grads(&self, cache: &ForwardCache, output_grad: &Tensor2) -> Result<MlpGrads, NetError> {
        Ok(self.backward_impl(cache, output_grad, false)?.0)
    }

    fn backward_impl(
        &self,
        cache: &ForwardCache,
        output_grad: &Tensor2,
        want_input_grad: bool,
    ) -> Result<(MlpGrads, Tensor2), NetError> {
        let out = cache.output();
        if cache.activations.len() != self.layers.len() + 1 || cache.activations[0].cols() != self.input_size() {
            return Err(NetError::Shape("forward cache does not belong to this network".into()));
        }
        if output_grad.shape() != out.shape() {
            return Err(NetError::Shape(format!(
                "output gradient is {:?}, output is {:?}",
                output_grad.shape(),
                out.shape()
            )));
        }
        let last = self.layers.len() - 1;
        let mut grads = self.zero_grads();
        let mut upstream = output_grad.clone();
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let y = &cache.activations[l + 1];
            let x = &cache.activations[l];
            let act = if l == last {
                self.output_activation
            } else {
                Activation::Tanh
            };
            let mut delta = upstream;
            if act == Activation::Tanh {
                for (d, &a) in delta.data_mut().iter_mut().zip(y.data()) {
                    *d *= 1.0 - a * a;
                }
            }
            let g = &mut grads.layers[l];
            let propagate = l > 0 || want_input_grad;
            let mut input_grad = if propagate {
                Tensor2::zeros(x.rows(), x.cols())
            } else {
                Tensor2::zeros(0, x.cols())
            };
            for b in 0..x.rows() {
                let dr = delta.row(b);
                let xr = x.row(b);
                for (o, &d) in dr.iter().enumerate() {
                    if d == 0.0 {
                        continue;
                    }
                    g.bias[o] += d;
                    axpy(g.weight.row_mut(o), d, xr);
                    if propagate {
                        axpy(input_grad.row_mut(b), d, layer.weight.row(o));
                    }
                }
            }
            upstream = input_grad;
        }
        Ok((grads, upstream))
    }

    /// `self += tau * (online - self)`, elementwise.
    pub fn polyak_update(&mut self, online: &Mlp, tau: f64) -> Result<(), NetError> {
        if !self.same_shape(online) {
            return Err(NetError::Shape(format!(
                "polyak target {:?} vs online {:?}",
                self.layer_sizes, online.layer_sizes
            )));
        }
        if !(0.0..=1.0).contains(&tau) {
            return Err(NetError::Shape(format!("tau {tau} outside [0, 1]")));
        }
        if tau == 1.0 {
            self.layers.clone_from(&online.layers);
            return Ok(());
        }
        for (t, o) in self.layers.iter_mut().zip(&online.layers) {
            for (tv, ov) in t.weight.data_mut().iter_mut().zip(o.weight.data()) {
                *tv += tau * (ov - *tv);
            }
            for (tv, ov) in t.bias.iter_mut().zip(&o.bias) {
                *tv += tau * (ov - *tv);
            }
        }
        Ok(())
    }

    /// Largest absolute elementwise difference to another network of the same shape.
    pub fn max_abs_diff(&self, other: &Mlp) -> f64 {
        self.layers
            .iter()
            .zip(&other.layers)
            .flat_map(|(a, b)| a.values().zip(b.values()))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}
