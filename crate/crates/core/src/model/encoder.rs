//! MLP encoders: ReLU on hidden layers, identity on the output layer.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::params::Parameters;
use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::Tensor2D;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

/// Fully connected layer, `y = act(x Wᵀ + b)` with `W` of shape `[out × in]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weight: Tensor2D,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Dense {
    /// Weights uniform in `±1/√fan_in`, zero bias.
    pub fn init(input: usize, output: usize, activation: Activation, rng: &mut SeededRng) -> Self {
        Dense {
            weight: uniform_weight(output, input, rng),
            bias: vec![0.0; output],
            activation,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.rows()
    }

    /// Pre-activation `x Wᵀ + b`.
    pub fn affine(&self, x: &Tensor2D) -> Result<Tensor2D> {
        let mut out = x.matmul_t(&self.weight)?;
        out.add_row_vector(&self.bias)?;
        Ok(out)
    }
}

pub(crate) fn uniform_weight(rows: usize, fan_in: usize, rng: &mut SeededRng) -> Tensor2D {
    let bound = 1.0 / libm::sqrt(fan_in.max(1) as f64);
    let mut w = Tensor2D::zeros(rows, fan_in);
    for v in w.as_mut_slice() {
        *v = rng.uniform_range(-bound, bound);
    }
    w
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub layers: Vec<Dense>,
}

/// Activations retained by [`EncoderParams::encode`] for the backward pass.
#[derive(Clone, Debug)]
pub struct EncoderCache {
    inputs: Vec<Tensor2D>,
    pre: Vec<Tensor2D>,
}

impl EncoderCache {
    pub fn batch_size(&self) -> usize {
        self.inputs.first().map_or(0, Tensor2D::rows)
    }
}

impl EncoderParams {
    /// Validates that consecutive layer dimensions chain.
    pub fn new(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid("encoder needs at least one layer"));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].output_dim() != pair[1].input_dim() {
                return Err(Error::shape(
                    "EncoderParams::new",
                    format!("layer {} input {}", i + 1, pair[0].output_dim()),
                    pair[1].input_dim(),
                ));
            }
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.output_dim() {
                return Err(Error::shape(
                    "EncoderParams::new",
                    format!("layer {i} bias of length {}", l.output_dim()),
                    l.bias.len(),
                ));
            }
        }
        Ok(Self { layers })
    }

    /// `dims = [input, hidden.., representation]`; ReLU on every layer but
    /// the last.
    pub fn init(dims: &[usize], rng: &mut SeededRng) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::invalid(format!("invalid encoder dims {dims:?}")));
        }
        let last = dims.len() - 2;
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let act = if i == last {
                    Activation::Identity
                } else {
                    Activation::Relu
                };
                Dense::init(w[0], w[1], act, rng)
            })
            .collect();
        Self::new(layers)
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim()
    }

    /// Forward pass that keeps the activations needed by [`Self::backward`].
    pub fn encode(&self, batch: &Tensor2D) -> Result<(Tensor2D, EncoderCache)> {
        if batch.cols() != self.input_dim() {
            return Err(Error::shape("encode", self.input_dim(), batch.cols()));
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut h = batch.clone();
        for layer in &self.layers {
            let a = layer.affine(&h)?;
            let out = match layer.activation {
                Activation::Relu => a.map(relu),
                Activation::Identity => a.clone(),
            };
            inputs.push(h);
            pre.push(a);
            h = out;
        }
        Ok((h, EncoderCache { inputs, pre }))
    }

    pub fn forward(&self, batch: &Tensor2D) -> Result<Tensor2D> {
        if batch.cols() != self.input_dim() {
            return Err(Error::shape("encode", self.input_dim(), batch.cols()));
        }
        let mut h = batch.clone();
        for layer in &self.layers {
            let a = layer.affine(&h)?;
            h = match layer.activation {
                Activation::Relu => a.map(relu),
                Activation::Identity => a,
            };
        }
        Ok(h)
    }

    /// Parameter gradients given `dL/dz`. The returned value has the same
    /// shape tree as `self`.
    pub fn backward(&self, cache: &EncoderCache, dz: &Tensor2D) -> Result<EncoderParams> {
        if cache.pre.len() != self.layers.len() {
            return Err(Error::InvalidState(format!(
                "encoder cache has {} layers, encoder has {}",
                cache.pre.len(),
                self.layers.len()
            )));
        }
        for (l, (layer, a)) in self.layers.iter().zip(&cache.pre).enumerate() {
            if a.cols() != layer.output_dim() || cache.inputs[l].cols() != layer.input_dim() {
                return Err(Error::InvalidState(format!(
                    "encoder cache does not match layer {l}"
                )));
            }
        }
        if dz.shape() != (cache.batch_size(), self.output_dim()) {
            return Err(Error::shape(
                "encoder backward",
                format!("{}x{}", cache.batch_size(), self.output_dim()),
                format!("{}x{}", dz.rows(), dz.cols()),
            ));
        }
        let mut grads: Vec<Dense> = Vec::with_capacity(self.layers.len());
        let mut upstream = dz.clone();
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let d_pre = match layer.activation {
                Activation::Relu => upstream
                    .zip_map(&cache.pre[l], "relu backward", |g, a| if a > 0.0 { g } else { 0.0 })?,
                Activation::Identity => upstream,
            };
            let d_weight = d_pre.t_matmul(&cache.inputs[l])?;
            let d_bias = d_pre.column_sums();
            if l > 0 {
                upstream = d_pre.matmul(&layer.weight)?;
            } else {
                upstream = Tensor2D::zeros(0, 0);
            }
            grads.push(Dense {
                weight: d_weight,
                bias: d_bias,
                activation: layer.activation,
            });
        }
        grads.reverse();
        Ok(EncoderParams { layers: grads })
    }

    /// Smallest `|pre-activation|` over hidden ReLU units for this batch.
    /// Finite-difference checks reject instances that sit near a kink.
    pub fn min_abs_hidden_preactivation(&self, batch: &Tensor2D) -> Result<f64> {
        let (_, cache) = self.encode(batch)?;
        Ok(self
            .layers
            .iter()
            .zip(&cache.pre)
            .filter(|(l, _)| l.activation == Activation::Relu)
            .flat_map(|(_, a)| a.as_slice().iter().map(|v| v.abs()))
            .fold(f64::INFINITY, f64::min))
    }
}

#[inline]
fn relu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        0.0
    }
}

impl Parameters for Dense {
    fn param_slices(&self) -> Vec<&[f64]> {
        vec![self.weight.as_slice(), &self.bias]
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        vec![self.weight.as_mut_slice(), &mut self.bias]
    }
}

impl Parameters for EncoderParams {
    fn param_slices(&self) -> Vec<&[f64]> {
        self.layers.iter().flat_map(|l| l.param_slices()).collect()
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.param_slices_mut())
            .collect()
    }
}
