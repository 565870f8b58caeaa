//! A small 1-D convolutional classifier with hand-written reverse-mode
//! differentiation.
//!
//! Activations are stored channel-major (`index = channel * len + t`).
//! Parameters and activations are `f32`; every reduction (convolution sums,
//! dense products, softmax, Adam moments) accumulates in `f64`.

mod analysis;
mod manifest;
mod pass;
mod train;

pub use analysis::{activation_maximization, activation_vector, mc_dropout_predict, ActMaxParams, Uncertainty};
pub use pass::{argmax, backward_input, forward, input_gradient, softmax, ForwardTrace};
pub use train::{train, EpochStats, TrainConfig, TrainHistory};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Layer configuration without parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LayerSpec {
    Conv1d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
    },
    Relu,
    MaxPool1d {
        size: usize,
    },
    Flatten,
    Dense {
        inputs: usize,
        outputs: usize,
    },
    Dropout {
        p: f32,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    /// Valid convolution with stride 1. Weights are `[out][in][kernel]`.
    Conv1d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        weights: Vec<f32>,
        bias: Vec<f32>,
    },
    Relu,
    /// Non-overlapping max pooling (stride = size), trailing remainder dropped.
    MaxPool1d { size: usize },
    Flatten,
    /// Weights are `[out][in]`.
    Dense {
        inputs: usize,
        outputs: usize,
        weights: Vec<f32>,
        bias: Vec<f32>,
    },
    /// Inverted dropout: kept units are scaled by `1 / (1 - p)`.
    Dropout { p: f32 },
}

impl Layer {
    pub fn spec(&self) -> LayerSpec {
        match *self {
            Layer::Conv1d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => LayerSpec::Conv1d {
                in_channels,
                out_channels,
                kernel,
            },
            Layer::Relu => LayerSpec::Relu,
            Layer::MaxPool1d { size } => LayerSpec::MaxPool1d { size },
            Layer::Flatten => LayerSpec::Flatten,
            Layer::Dense {
                inputs, outputs, ..
            } => LayerSpec::Dense { inputs, outputs },
            Layer::Dropout { p } => LayerSpec::Dropout { p },
        }
    }

    fn params(&self) -> Option<(&[f32], &[f32])> {
        match self {
            Layer::Conv1d { weights, bias, .. } | Layer::Dense { weights, bias, .. } => {
                Some((weights, bias))
            }
            _ => None,
        }
    }

    fn params_mut(&mut self) -> Option<(&mut Vec<f32>, &mut Vec<f32>)> {
        match self {
            Layer::Conv1d { weights, bias, .. } | Layer::Dense { weights, bias, .. } => {
                Some((weights, bias))
            }
            _ => None,
        }
    }

    fn output_shape(&self, input: Shape) -> Result<Shape> {
        match *self {
            Layer::Conv1d {
                in_channels,
                out_channels,
                kernel,
                ref weights,
                ref bias,
            } => {
                if kernel == 0 {
                    return Err(Error::ShapeMismatch("conv1d kernel must be at least 1".into()));
                }
                if weights.len() != out_channels * in_channels * kernel || bias.len() != out_channels {
                    return Err(Error::ShapeMismatch(format!(
                        "conv1d {in_channels}->{out_channels} k={kernel} has {} weights and {} biases",
                        weights.len(),
                        bias.len()
                    )));
                }
                if input.channels != in_channels {
                    return Err(Error::ShapeMismatch(format!(
                        "conv1d expects {in_channels} channels, got {}",
                        input.channels
                    )));
                }
                if input.len < kernel {
                    return Err(Error::ShapeMismatch(format!(
                        "conv1d kernel {kernel} longer than input length {}",
                        input.len
                    )));
                }
                Ok(Shape {
                    channels: out_channels,
                    len: input.len - kernel + 1,
                })
            }
            Layer::Relu | Layer::Dropout { .. } => {
                if let Layer::Dropout { p } = *self {
                    if !(0.0..1.0).contains(&p) {
                        return Err(Error::ShapeMismatch(format!("dropout rate {p} outside [0, 1)")));
                    }
                }
                Ok(input)
            }
            Layer::MaxPool1d { size } => {
                if size == 0 || input.len < size {
                    return Err(Error::ShapeMismatch(format!(
                        "maxpool size {size} does not fit input length {}",
                        input.len
                    )));
                }
                Ok(Shape {
                    channels: input.channels,
                    len: input.len / size,
                })
            }
            Layer::Flatten => Ok(Shape {
                channels: 1,
                len: input.numel(),
            }),
            Layer::Dense {
                inputs,
                outputs,
                ref weights,
                ref bias,
            } => {
                if weights.len() != inputs * outputs || bias.len() != outputs {
                    return Err(Error::ShapeMismatch(format!(
                        "dense {inputs}->{outputs} has {} weights and {} biases",
                        weights.len(),
                        bias.len()
                    )));
                }
                if input.numel() != inputs {
                    return Err(Error::ShapeMismatch(format!(
                        "dense expects {inputs} inputs, got {}",
                        input.numel()
                    )));
                }
                Ok(Shape {
                    channels: 1,
                    len: outputs,
                })
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape {
    pub channels: usize,
    pub len: usize,
}

impl Shape {
    pub fn numel(self) -> usize {
        self.channels * self.len
    }
}

/// Ordered layer stack ending in a dense layer that produces the class
/// logits. Softmax is applied outside the stack.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    input_length: usize,
    classes: usize,
    layers: Vec<Layer>,
    shapes: Vec<Shape>,
}

impl Model {
    pub fn new(input_length: usize, classes: usize, layers: Vec<Layer>) -> Result<Self> {
        if input_length == 0 {
            return Err(Error::ShapeMismatch("input length must be positive".into()));
        }
        if classes < 2 {
            return Err(Error::ShapeMismatch(format!("{classes} classes, at least 2 required")));
        }
        let mut shape = Shape {
            channels: 1,
            len: input_length,
        };
        let mut shapes = Vec::with_capacity(layers.len());
        for layer in &layers {
            shape = layer.output_shape(shape)?;
            shapes.push(shape);
        }
        match layers.last() {
            Some(Layer::Dense { outputs, .. }) if *outputs == classes => {}
            _ => {
                return Err(Error::ShapeMismatch(format!(
                    "final layer must be dense with {classes} outputs"
                )))
            }
        }
        Ok(Self {
            input_length,
            classes,
            layers,
            shapes,
        })
    }

    /// Three conv/pool blocks with (3, 6, 9) filters, kernel 3, pool 5, then
    /// Dense(50) + ReLU + Dropout(0.5) and the classifier.
    pub fn architecture_a(input_length: usize, classes: usize, seed: u64) -> Result<Self> {
        let mut b = ModelBuilder::new(input_length, classes);
        for filters in [3, 6, 9] {
            b = b.conv1d(filters, 3).relu().max_pool(5);
        }
        b.flatten().dense(50).relu().dropout(0.5).dense(classes).build(seed)
    }

    /// Four conv blocks with (10, 50, 100, 150) filters. Pooling follows the
    /// first three only; a fourth pool of size 5 would not fit the length
    /// left at that depth for 500-point series.
    pub fn architecture_b(input_length: usize, classes: usize, seed: u64) -> Result<Self> {
        let mut b = ModelBuilder::new(input_length, classes);
        for filters in [10, 50, 100] {
            b = b.conv1d(filters, 3).relu().max_pool(5);
        }
        b.conv1d(150, 3)
            .relu()
            .flatten()
            .dense(50)
            .relu()
            .dropout(0.5)
            .dense(classes)
            .build(seed)
    }

    pub fn input_length(&self) -> usize {
        self.input_length
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(Layer::spec).collect()
    }

    /// Output shape of every layer.
    pub fn shapes(&self) -> &[Shape] {
        &self.shapes
    }

    pub fn has_dropout(&self) -> bool {
        self.layers.iter().any(|l| matches!(l, Layer::Dropout { p } if *p > 0.0))
    }

    /// All parameters flattened in layer order (weights then bias).
    pub fn parameters(&self) -> Vec<f32> {
        self.layers
            .iter()
            .filter_map(Layer::params)
            .flat_map(|(w, b)| w.iter().chain(b).copied())
            .collect()
    }

    pub fn logits(&self, x: &[f32]) -> Result<Vec<f32>> {
        Ok(forward(self, x, false, 0)?.logits)
    }

    pub fn predict(&self, x: &[f32]) -> Result<usize> {
        Ok(argmax(&self.logits(x)?))
    }

    pub fn predict_all(&self, xs: &[Vec<f32>]) -> Result<Vec<usize>> {
        use rayon::prelude::*;
        xs.par_iter().map(|x| self.predict(x)).collect()
    }
}

/// Builds a layer stack, inferring input sizes and drawing Glorot-uniform
/// weights from a seeded generator.
#[derive(Debug, Clone)]
pub struct ModelBuilder {
    input_length: usize,
    classes: usize,
    specs: Vec<LayerSpec>,
}

impl ModelBuilder {
    pub fn new(input_length: usize, classes: usize) -> Self {
        Self {
            input_length,
            classes,
            specs: Vec::new(),
        }
    }

    fn current_shape(&self) -> Shape {
        let mut shape = Shape {
            channels: 1,
            len: self.input_length,
        };
        for spec in &self.specs {
            shape = match *spec {
                LayerSpec::Conv1d {
                    out_channels,
                    kernel,
                    ..
                } => Shape {
                    channels: out_channels,
                    len: shape.len.saturating_sub(kernel - 1),
                },
                LayerSpec::MaxPool1d { size } => Shape {
                    channels: shape.channels,
                    len: shape.len / size.max(1),
                },
                LayerSpec::Flatten => Shape {
                    channels: 1,
                    len: shape.numel(),
                },
                LayerSpec::Dense { outputs, .. } => Shape {
                    channels: 1,
                    len: outputs,
                },
                LayerSpec::Relu | LayerSpec::Dropout { .. } => shape,
            };
        }
        shape
    }

    pub fn conv1d(mut self, out_channels: usize, kernel: usize) -> Self {
        let in_channels = self.current_shape().channels;
        self.specs.push(LayerSpec::Conv1d {
            in_channels,
            out_channels,
            kernel,
        });
        self
    }

    pub fn relu(mut self) -> Self {
        self.specs.push(LayerSpec::Relu);
        self
    }

    pub fn max_pool(mut self, size: usize) -> Self {
        self.specs.push(LayerSpec::MaxPool1d { size });
        self
    }

    pub fn flatten(mut self) -> Self {
        self.specs.push(LayerSpec::Flatten);
        self
    }

    pub fn dense(mut self, outputs: usize) -> Self {
        let inputs = self.current_shape().numel();
        self.specs.push(LayerSpec::Dense { inputs, outputs });
        self
    }

    pub fn dropout(mut self, p: f32) -> Self {
        self.specs.push(LayerSpec::Dropout { p });
        self
    }

    pub fn build(self, seed: u64) -> Result<Model> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = self
            .specs
            .iter()
            .map(|spec| init_layer(*spec, &mut rng))
            .collect();
        Model::new(self.input_length, self.classes, layers)
    }
}

fn glorot(rng: &mut ChaCha8Rng, count: usize, fan_in: usize, fan_out: usize) -> Vec<f32> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..count)
        .map(|_| rng.random_range(-limit..limit) as f32)
        .collect()
}

fn init_layer(spec: LayerSpec, rng: &mut ChaCha8Rng) -> Layer {
    match spec {
        LayerSpec::Conv1d {
            in_channels,
            out_channels,
            kernel,
        } => Layer::Conv1d {
            in_channels,
            out_channels,
            kernel,
            weights: glorot(
                rng,
                out_channels * in_channels * kernel,
                in_channels * kernel,
                out_channels * kernel,
            ),
            bias: vec![0.0; out_channels],
        },
        LayerSpec::Relu => Layer::Relu,
        LayerSpec::MaxPool1d { size } => Layer::MaxPool1d { size },
        LayerSpec::Flatten => Layer::Flatten,
        LayerSpec::Dense { inputs, outputs } => Layer::Dense {
            inputs,
            outputs,
            weights: glorot(rng, inputs * outputs, inputs, outputs),
            bias: vec![0.0; outputs],
        },
        LayerSpec::Dropout { p } => Layer::Dropout { p },
    }
}
