//! Deterministic layers and activations.
//!
//! Eager functions operate on [`Tensor`]s; the `*_var` variants and
//! [`BatchNorm::forward_var`] build the same computation on a [`Graph`].

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::rng::SeededRng;
use crate::tensor::{Graph, Padding, Tensor, Var};

pub const LEAKY_SLOPE: f64 = 0.01;
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

/// Declarative description of a single layer, as used in model config files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerConfig {
    Conv {
        filters: usize,
        kernel_size: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: Padding,
    },
    Dense {
        units: usize,
    },
    Maxpool {
        window: usize,
    },
    Avgpool {
        window: usize,
    },
    Relu,
    LeakyRelu {
        #[serde(default = "default_slope")]
        slope: f64,
    },
    Softplus {
        #[serde(default = "one_f")]
        beta: f64,
    },
    Softmax,
    Dropout {
        rate: f64,
    },
    Batchnorm {
        #[serde(default = "default_eps")]
        eps: f64,
        #[serde(default = "default_momentum")]
        momentum: f64,
    },
}

fn one() -> usize {
    1
}
fn one_f() -> f64 {
    1.0
}
fn default_slope() -> f64 {
    LEAKY_SLOPE
}
fn default_eps() -> f64 {
    BN_EPS
}
fn default_momentum() -> f64 {
    BN_MOMENTUM
}

impl LayerConfig {
    pub fn validate(&self) -> Result<()> {
        match *self {
            LayerConfig::Conv {
                filters,
                kernel_size,
                stride,
                ..
            } => {
                if filters == 0 || kernel_size == 0 || stride == 0 {
                    return Err(invalid!("conv filters, kernel size and stride must be positive"));
                }
            }
            LayerConfig::Dense { units } if units == 0 => return Err(invalid!("dense layer needs at least one unit")),
            LayerConfig::Maxpool { window } | LayerConfig::Avgpool { window } if window == 0 => {
                return Err(invalid!("pooling window must be at least 1"))
            }
            LayerConfig::LeakyRelu { slope } => check_slope(slope)?,
            LayerConfig::Softplus { beta } => check_beta(beta)?,
            LayerConfig::Dropout { rate } => check_rate(rate)?,
            LayerConfig::Batchnorm { eps, momentum } if (!(eps > 0.0) || !(0.0..=1.0).contains(&momentum)) => {
                return Err(invalid!("batchnorm needs eps > 0 and momentum in [0,1]"));
            }
            _ => {}
        }
        Ok(())
    }
}

pub(crate) fn check_rate(rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(invalid!("dropout rate must be in [0,1), got {rate}"));
    }
    Ok(())
}

pub(crate) fn check_slope(slope: f64) -> Result<()> {
    if !(slope > 0.0 && slope < 1.0) {
        return Err(invalid!("leaky slope must be in (0,1), got {slope}"));
    }
    Ok(())
}

fn check_beta(beta: f64) -> Result<()> {
    if !(beta > 0.0) || !beta.is_finite() {
        return Err(invalid!("softplus beta must be positive, got {beta}"));
    }
    Ok(())
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Tensor {
    x.map(|v| if v > 0.0 { v } else { slope * v })
}

/// `(1/beta) ln(1 + exp(beta x))`.
///
/// ```
/// let x = admri::Tensor::vector(vec![0.0, 50.0]);
/// let y = admri::nn::softplus(&x, 1.0).unwrap();
/// assert!((y.data()[0] - 2f64.ln()).abs() < 1e-15);
/// assert!((y.data()[1] - 50.0).abs() < 1e-9);
/// ```
pub fn softplus(x: &Tensor, beta: f64) -> Result<Tensor> {
    check_beta(beta)?;
    Ok(x.map(|v| softplus_scalar(v, beta)))
}

pub fn softplus_scalar(x: f64, beta: f64) -> f64 {
    let bx = beta * x;
    if bx > 30.0 {
        x + (-bx).exp().ln_1p() / beta
    } else {
        bx.exp().ln_1p() / beta
    }
}

/// Row-wise softmax over the last axis.
pub fn softmax(x: &Tensor) -> Tensor {
    let mut out = x.clone().with_requires_grad(false);
    let c = *x.shape().last().unwrap_or(&1);
    for row in out.data_mut().chunks_mut(c) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Inverted-dropout multipliers: `0` with probability `rate`, else `1/(1-rate)`.
pub fn dropout_mask(n: usize, rate: f64, rng: &mut SeededRng) -> Vec<f64> {
    let keep = 1.0 / (1.0 - rate);
    (0..n).map(|_| if rng.uniform() < rate { 0.0 } else { keep }).collect()
}

pub fn dropout(x: &Tensor, rate: f64, mode: Mode, rng: &mut SeededRng) -> Result<Tensor> {
    check_rate(rate)?;
    if mode == Mode::Eval || rate == 0.0 {
        return Ok(x.clone());
    }
    let mask = dropout_mask(x.numel(), rate, rng);
    let data = x.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
    Tensor::new(x.shape().to_vec(), data)
}

pub fn dropout_var(g: &mut Graph, x: Var, rate: f64, mode: Mode, rng: &mut SeededRng) -> Result<Var> {
    check_rate(rate)?;
    if mode == Mode::Eval || rate == 0.0 {
        return Ok(x);
    }
    let mask = dropout_mask(g.value(x).numel(), rate, rng);
    g.mul_const(x, mask)
}

/// Per-channel normalization over every axis but the last.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Vec<f64>,
    /// Biased batch variances, averaged.
    pub running_var: Vec<f64>,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Tensor::ones([channels]),
            beta: Tensor::zeros([channels]),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    /// Eager forward. In training mode the running statistics are updated.
    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let gamma = g.constant(self.gamma.clone());
        let beta = g.constant(self.beta.clone());
        let y = self.forward_var(&mut g, xv, gamma, beta, mode)?;
        Ok(g.value(y).clone())
    }

    /// Graph forward using externally registered scale/shift parameters.
    pub fn forward_var(&mut self, g: &mut Graph, x: Var, gamma: Var, beta: Var, mode: Mode) -> Result<Var> {
        match mode {
            Mode::Train => {
                let (y, stats) = g.batch_norm(x, gamma, beta, self.eps)?;
                update_running(
                    &mut self.running_mean,
                    &mut self.running_var,
                    &stats.mean,
                    &stats.var,
                    self.momentum,
                );
                Ok(y)
            }
            Mode::Eval => g.channel_affine(x, gamma, beta, &self.running_mean, &self.running_var, self.eps),
        }
    }
}

/// `running = (1 - momentum) * running + momentum * batch`.
pub fn update_running(running_mean: &mut [f64], running_var: &mut [f64], mean: &[f64], var: &[f64], momentum: f64) {
    for (r, b) in running_mean.iter_mut().zip(mean) {
        *r = (1.0 - momentum) * *r + momentum * b;
    }
    for (r, b) in running_var.iter_mut().zip(var) {
        *r = (1.0 - momentum) * *r + momentum * b;
    }
}

/// Uniform in `±sqrt(6 / fan_in)`.
pub fn he_uniform(shape: &[usize], fan_in: usize, rng: &mut SeededRng) -> Tensor {
    let limit = (6.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.uniform_range(-limit, limit)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape from caller")
}
