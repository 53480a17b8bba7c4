use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Mode, RunningStats, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Linear,
    BatchNorm,
    Relu,
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) enum Layer {
    /// `x · weight + bias`, weight stored `in × out`.
    Linear {
        weight: Tensor,
        bias: Tensor,
    },
    BatchNorm {
        gamma: Tensor,
        beta: Tensor,
        stats: RunningStats,
    },
    Relu,
}

impl Layer {
    fn kind(&self) -> LayerKind {
        match self {
            Layer::Linear { .. } => LayerKind::Linear,
            Layer::BatchNorm { .. } => LayerKind::BatchNorm,
            Layer::Relu => LayerKind::Relu,
        }
    }
}

/// Plain feed-forward stack. Parameters are enumerated layer by layer
/// (linear: weight, bias; batchnorm: gamma, beta).
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    layers: Vec<Layer>,
    input_dim: usize,
    output_dim: usize,
}

/// Weights ~ N(0, 2/fan_in), zero bias.
pub(crate) fn he_linear(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Layer {
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite std");
    let data = (0..fan_in * fan_out).map(|_| normal.sample(rng)).collect();
    Layer::Linear {
        weight: Tensor::new(fan_in, fan_out, data).expect("shape"),
        bias: Tensor::zeros(1, fan_out),
    }
}

pub(crate) fn batchnorm_layer(dim: usize) -> Layer {
    Layer::BatchNorm {
        gamma: Tensor::full(1, dim, 1.0),
        beta: Tensor::zeros(1, dim),
        stats: RunningStats::new(dim),
    }
}

impl Mlp {
    pub(crate) fn new(layers: Vec<Layer>, input_dim: usize, output_dim: usize) -> Self {
        Self {
            layers,
            input_dim,
            output_dim,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn layer_kinds(&self) -> Vec<LayerKind> {
        self.layers.iter().map(Layer::kind).collect()
    }

    pub fn parameters(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::Linear { weight, bias } => out.extend([weight, bias]),
                Layer::BatchNorm { gamma, beta, .. } => out.extend([gamma, beta]),
                Layer::Relu => {}
            }
        }
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            match layer {
                Layer::Linear { weight, bias } => out.extend([weight, bias]),
                Layer::BatchNorm { gamma, beta, .. } => out.extend([gamma, beta]),
                Layer::Relu => {}
            }
        }
        out
    }

    pub fn parameter_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::Linear { .. } => {
                    out.push(format!("layers.{i}.weight"));
                    out.push(format!("layers.{i}.bias"));
                }
                Layer::BatchNorm { .. } => {
                    out.push(format!("layers.{i}.gamma"));
                    out.push(format!("layers.{i}.beta"));
                }
                Layer::Relu => {}
            }
        }
        out
    }

    pub fn running_stats(&self) -> Vec<&RunningStats> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                Layer::BatchNorm { stats, .. } => Some(stats),
                _ => None,
            })
            .collect()
    }

    pub fn running_stats_mut(&mut self) -> Vec<&mut RunningStats> {
        self.layers
            .iter_mut()
            .filter_map(|l| match l {
                Layer::BatchNorm { stats, .. } => Some(stats),
                _ => None,
            })
            .collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.parameters().iter().map(|t| t.len()).sum()
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.parameters()
            .into_iter()
            .map(|p| tape.leaf(p.clone(), trainable))
            .collect()
    }

    /// Forward pass using `params` from [`Mlp::bind`]. Train mode updates
    /// batchnorm running statistics.
    pub fn forward(&mut self, tape: &mut Tape, params: &[Var], x: Var, mode: Mode) -> Result<Var> {
        let cols = tape.value(x).cols();
        if cols != self.input_dim {
            return Err(Error::shape(
                "mlp input",
                &tape.value(x).shape(),
                &[self.input_dim],
            ));
        }
        let mut cursor = params.iter().copied();
        let mut next = || {
            cursor
                .next()
                .ok_or_else(|| Error::Contract("too few bound parameters".into()))
        };
        let mut h = x;
        for layer in &mut self.layers {
            h = match layer {
                Layer::Linear { .. } => {
                    let (w, b) = (next()?, next()?);
                    let z = tape.matmul(h, w)?;
                    tape.add(z, b)?
                }
                Layer::BatchNorm { stats, .. } => {
                    let (g, b) = (next()?, next()?);
                    tape.batchnorm(h, g, b, stats, mode)?
                }
                Layer::Relu => tape.relu(h),
            };
        }
        Ok(h)
    }
}
