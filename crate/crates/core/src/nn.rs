//! Parameterized building blocks shared by the adaptive-kernel layers and the
//! network.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::{
    batch_norm, leaky_relu, pointwise_linear, BatchNormStats, Element, Mode, Parameter, Tensor,
    BN_EPSILON, BN_MOMENTUM,
};

/// Default negative slope of every LeakyReLU in the network.
pub const DEFAULT_LEAKY_SLOPE: f64 = 0.2;

/// Something that owns named parameters and batch-norm statistics.
pub trait Module<T: Element> {
    fn parameters<'a>(&'a self, out: &mut Vec<&'a Parameter<T>>);
    fn parameters_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Parameter<T>>);
    fn buffers<'a>(&'a self, _out: &mut Vec<(&'a str, &'a BatchNormStats<T>)>) {}
}

/// Glorot-uniform weights `U(-a, a)` with `a = sqrt(6 / (fan_in + fan_out))`.
/// Samples are drawn in f64 so every dtype sees the same sequence.
pub fn glorot_uniform<T: Element>(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Vec<T> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..fan_in * fan_out)
        .map(|_| T::from_f64_lossy(rng.gen_range(-a..a)))
        .collect()
}

/// Per-position affine map `(C_out, C_in)` plus bias; a 1x1 convolution over
/// any trailing grid, or a fully-connected layer on `(B, C_in)`.
#[derive(Debug)]
pub struct Linear<T: Element> {
    pub weight: Parameter<T>,
    pub bias: Parameter<T>,
}

impl<T: Element> Linear<T> {
    pub fn new(prefix: &str, c_in: usize, c_out: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Linear {
            weight: Parameter::new(
                format!("{prefix}.weight"),
                glorot_uniform(rng, c_in, c_out),
                &[c_out, c_in],
            )?,
            bias: Parameter::new(format!("{prefix}.bias"), vec![T::zero(); c_out], &[c_out])?,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        pointwise_linear(x, self.weight.value(), Some(self.bias.value()))
    }
}

impl<T: Element> Module<T> for Linear<T> {
    fn parameters<'a>(&'a self, out: &mut Vec<&'a Parameter<T>>) {
        out.extend([&self.weight, &self.bias]);
    }

    fn parameters_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Parameter<T>>) {
        out.extend([&mut self.weight, &mut self.bias]);
    }
}

#[derive(Debug)]
pub struct BatchNorm<T: Element> {
    name: String,
    pub gamma: Parameter<T>,
    pub beta: Parameter<T>,
    pub stats: BatchNormStats<T>,
    pub momentum: f64,
    pub epsilon: f64,
}

impl<T: Element> BatchNorm<T> {
    pub fn new(prefix: &str, channels: usize) -> Result<Self> {
        Ok(BatchNorm {
            name: prefix.to_string(),
            gamma: Parameter::new(format!("{prefix}.gamma"), vec![T::one(); channels], &[channels])?,
            beta: Parameter::new(format!("{prefix}.beta"), vec![T::zero(); channels], &[channels])?,
            stats: BatchNormStats::new(channels),
            momentum: BN_MOMENTUM,
            epsilon: BN_EPSILON,
        })
    }

    pub fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        batch_norm(
            x,
            self.gamma.value(),
            self.beta.value(),
            &self.stats,
            mode,
            self.momentum,
            self.epsilon,
        )
    }
}

impl<T: Element> Module<T> for BatchNorm<T> {
    fn parameters<'a>(&'a self, out: &mut Vec<&'a Parameter<T>>) {
        out.extend([&self.gamma, &self.beta]);
    }

    fn parameters_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Parameter<T>>) {
        out.extend([&mut self.gamma, &mut self.beta]);
    }

    fn buffers<'a>(&'a self, out: &mut Vec<(&'a str, &'a BatchNormStats<T>)>) {
        out.push((&self.name, &self.stats));
    }
}

/// `LeakyReLU(BN(Linear(x)))`.
#[derive(Debug)]
pub struct ConvBlock<T: Element> {
    pub linear: Linear<T>,
    pub bn: BatchNorm<T>,
    pub slope: f64,
}

impl<T: Element> ConvBlock<T> {
    /// Parameters are named `{prefix}.conv.*` and `{prefix}.bn.*`.
    pub fn new(prefix: &str, c_in: usize, c_out: usize, slope: f64, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(ConvBlock {
            linear: Linear::new(&format!("{prefix}.conv"), c_in, c_out, rng)?,
            bn: BatchNorm::new(&format!("{prefix}.bn"), c_out)?,
            slope,
        })
    }

    pub fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let y = self.bn.forward(&self.linear.forward(x)?, mode)?;
        Ok(leaky_relu(&y, T::from_f64_lossy(self.slope)))
    }

    /// Closed-form parameter count of a block with these extents.
    pub fn parameter_count(c_in: usize, c_out: usize) -> usize {
        c_out * c_in + c_out + 2 * c_out
    }
}

impl<T: Element> Module<T> for ConvBlock<T> {
    fn parameters<'a>(&'a self, out: &mut Vec<&'a Parameter<T>>) {
        self.linear.parameters(out);
        self.bn.parameters(out);
    }

    fn parameters_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Parameter<T>>) {
        self.linear.parameters_mut(out);
        self.bn.parameters_mut(out);
    }

    fn buffers<'a>(&'a self, out: &mut Vec<(&'a str, &'a BatchNormStats<T>)>) {
        self.bn.buffers(out);
    }
}
