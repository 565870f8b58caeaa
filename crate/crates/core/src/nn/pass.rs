use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Layer, Model, Shape};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    /// Output of every layer in stack order.
    pub outputs: Vec<Vec<f32>>,
    pub logits: Vec<f32>,
    pub probabilities: Vec<f32>,
    /// Input of the final dense layer.
    pub penultimate: Vec<f32>,
}

/// What the backward pass needs from the forward pass.
pub(crate) struct Tape {
    pub inputs: Vec<Vec<f32>>,
    /// Max-pool winners, indexed into the layer input.
    pub argmax: Vec<Option<Vec<usize>>>,
    /// Dropout multipliers (0 or 1/(1-p)); `None` when dropout was inactive.
    pub dropout: Vec<Option<Vec<f32>>>,
    pub output: Vec<f32>,
}

pub(crate) fn check_input(model: &Model, x: &[f32]) -> Result<()> {
    if x.len() != model.input_length() {
        return Err(Error::ShapeMismatch(format!(
            "model expects {} time points, got {}",
            model.input_length(),
            x.len()
        )));
    }
    Ok(())
}

pub(crate) fn run_tape(model: &Model, x: &[f32], rng: Option<&mut ChaCha8Rng>) -> Result<Tape> {
    check_input(model, x)?;
    let n = model.layers().len();
    let mut inputs = Vec::with_capacity(n);
    let mut argmax = Vec::with_capacity(n);
    let mut dropout = Vec::with_capacity(n);
    let mut rng = rng;
    let mut current = x.to_vec();
    let mut shape = Shape {
        channels: 1,
        len: model.input_length(),
    };
    for (layer, &out_shape) in model.layers().iter().zip(model.shapes()) {
        let mut winners = None;
        let mut mask = None;
        let next = match layer {
            Layer::Conv1d {
                in_channels,
                out_channels,
                kernel,
                weights,
                bias,
            } => conv_forward(&current, shape.len, *in_channels, *out_channels, *kernel, weights, bias),
            Layer::Relu => current.iter().map(|&v| v.max(0.0)).collect(),
            Layer::MaxPool1d { size } => {
                let (out, idx) = pool_forward(&current, shape, *size);
                winners = Some(idx);
                out
            }
            Layer::Flatten => current.clone(),
            Layer::Dense {
                inputs,
                outputs,
                weights,
                bias,
            } => dense_forward(&current, *inputs, *outputs, weights, bias),
            Layer::Dropout { p } => match rng.as_deref_mut() {
                Some(r) if *p > 0.0 => {
                    let scale = 1.0 / (1.0 - *p);
                    let m: Vec<f32> = (0..current.len())
                        .map(|_| if r.random::<f32>() < *p { 0.0 } else { scale })
                        .collect();
                    let out = current.iter().zip(&m).map(|(v, s)| v * s).collect();
                    mask = Some(m);
                    out
                }
                _ => current.clone(),
            },
        };
        inputs.push(std::mem::replace(&mut current, next));
        argmax.push(winners);
        dropout.push(mask);
        shape = out_shape;
    }
    Ok(Tape {
        inputs,
        argmax,
        dropout,
        output: current,
    })
}

fn conv_forward(
    x: &[f32],
    len: usize,
    in_ch: usize,
    out_ch: usize,
    kernel: usize,
    weights: &[f32],
    bias: &[f32],
) -> Vec<f32> {
    let out_len = len - kernel + 1;
    let mut out = Vec::with_capacity(out_ch * out_len);
    for o in 0..out_ch {
        for t in 0..out_len {
            let mut acc = f64::from(bias[o]);
            for i in 0..in_ch {
                let w = &weights[(o * in_ch + i) * kernel..][..kernel];
                let xs = &x[i * len + t..][..kernel];
                for (wk, xk) in w.iter().zip(xs) {
                    acc += f64::from(*wk) * f64::from(*xk);
                }
            }
            out.push(acc as f32);
        }
    }
    out
}

fn pool_forward(x: &[f32], shape: Shape, size: usize) -> (Vec<f32>, Vec<usize>) {
    let out_len = shape.len / size;
    let mut out = Vec::with_capacity(shape.channels * out_len);
    let mut idx = Vec::with_capacity(shape.channels * out_len);
    for c in 0..shape.channels {
        for j in 0..out_len {
            let start = c * shape.len + j * size;
            let mut best = start;
            for k in start + 1..start + size {
                // strict comparison keeps the first maximum
                if x[k] > x[best] {
                    best = k;
                }
            }
            out.push(x[best]);
            idx.push(best);
        }
    }
    (out, idx)
}

fn dense_forward(x: &[f32], inputs: usize, outputs: usize, weights: &[f32], bias: &[f32]) -> Vec<f32> {
    (0..outputs)
        .map(|o| {
            let row = &weights[o * inputs..][..inputs];
            let acc = row
                .iter()
                .zip(x)
                .fold(f64::from(bias[o]), |acc, (w, v)| acc + f64::from(*w) * f64::from(*v));
            acc as f32
        })
        .collect()
}

/// Numerically stable softmax with `f64` accumulation.
pub fn softmax(logits: &[f32]) -> Vec<f32> {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (f64::from(l) - f64::from(max)).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.iter().map(|e| (e / total) as f32).collect()
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Runs the layer stack. With `dropout_active`, dropout masks are drawn from
/// a generator seeded with `rng_seed`; otherwise dropout is the identity.
pub fn forward(model: &Model, x: &[f32], dropout_active: bool, rng_seed: u64) -> Result<ForwardTrace> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let tape = run_tape(model, x, dropout_active.then_some(&mut rng))?;
    let mut outputs: Vec<Vec<f32>> = tape.inputs.into_iter().skip(1).collect();
    outputs.push(tape.output.clone());
    let penultimate = if outputs.len() >= 2 {
        outputs[outputs.len() - 2].clone()
    } else {
        x.to_vec()
    };
    Ok(ForwardTrace {
        probabilities: softmax(&tape.output),
        logits: tape.output,
        outputs,
        penultimate,
    })
}

/// Per-parameter gradients, one `(weights, bias)` pair per parametric layer.
#[derive(Debug, Clone)]
pub(crate) struct ParamGrads {
    pub layers: Vec<Option<(Vec<f64>, Vec<f64>)>>,
}

impl ParamGrads {
    pub fn zeros(model: &Model) -> Self {
        Self {
            layers: model
                .layers()
                .iter()
                .map(|l| l.params().map(|(w, b)| (vec![0.0; w.len()], vec![0.0; b.len()])))
                .collect(),
        }
    }
}

/// Reverse pass from an upstream gradient on the logits. Accumulates
/// parameter gradients into `grads` when given and returns the gradient
/// with respect to the input series.
pub(crate) fn backward(model: &Model, tape: &Tape, upstream: &[f64], mut grads: Option<&mut ParamGrads>) -> Vec<f64> {
    let mut grad = upstream.to_vec();
    let mut out_shape_iter = model.shapes().iter().rev();
    for (li, layer) in model.layers().iter().enumerate().rev() {
        let input = &tape.inputs[li];
        let _out_shape = out_shape_iter.next();
        let in_len = if li == 0 {
            model.input_length()
        } else {
            model.shapes()[li - 1].len
        };
        grad = match layer {
            Layer::Conv1d {
                in_channels,
                out_channels,
                kernel,
                weights,
                ..
            } => {
                let (in_ch, out_ch, k) = (*in_channels, *out_channels, *kernel);
                let out_len = in_len - k + 1;
                let mut gx = vec![0.0f64; in_ch * in_len];
                let mut slot = grads.as_deref_mut().and_then(|g| g.layers[li].as_mut());
                for o in 0..out_ch {
                    for t in 0..out_len {
                        let g = grad[o * out_len + t];
                        if g == 0.0 {
                            continue;
                        }
                        if let Some((gw, gb)) = slot.as_mut() {
                            gb[o] += g;
                            for i in 0..in_ch {
                                for kk in 0..k {
                                    gw[(o * in_ch + i) * k + kk] += g * f64::from(input[i * in_len + t + kk]);
                                }
                            }
                        }
                        for i in 0..in_ch {
                            for kk in 0..k {
                                gx[i * in_len + t + kk] += g * f64::from(weights[(o * in_ch + i) * k + kk]);
                            }
                        }
                    }
                }
                gx
            }
            Layer::Relu => grad
                .iter()
                .zip(input)
                .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                .collect(),
            Layer::MaxPool1d { .. } => {
                let mut gx = vec![0.0f64; input.len()];
                let winners = tape.argmax[li].as_ref().expect("pool winners recorded");
                for (g, &w) in grad.iter().zip(winners) {
                    gx[w] += g;
                }
                gx
            }
            Layer::Flatten => grad,
            Layer::Dense {
                inputs,
                outputs,
                weights,
                ..
            } => {
                let mut gx = vec![0.0f64; *inputs];
                if let Some((gw, gb)) = grads.as_deref_mut().and_then(|g| g.layers[li].as_mut()) {
                    for o in 0..*outputs {
                        gb[o] += grad[o];
                        for i in 0..*inputs {
                            gw[o * inputs + i] += grad[o] * f64::from(input[i]);
                        }
                    }
                }
                for o in 0..*outputs {
                    let g = grad[o];
                    if g == 0.0 {
                        continue;
                    }
                    for i in 0..*inputs {
                        gx[i] += g * f64::from(weights[o * inputs + i]);
                    }
                }
                gx
            }
            Layer::Dropout { .. } => match &tape.dropout[li] {
                Some(mask) => grad.iter().zip(mask).map(|(g, &m)| g * f64::from(m)).collect(),
                None => grad,
            },
        };
    }
    grad
}

/// Gradient of `upstream · logits` with respect to the input, dropout
/// inactive.
pub fn input_gradient(model: &Model, x: &[f32], upstream: &[f64]) -> Result<Vec<f64>> {
    if upstream.len() != model.classes() {
        return Err(Error::ShapeMismatch(format!(
            "upstream gradient has {} entries for {} classes",
            upstream.len(),
            model.classes()
        )));
    }
    let tape = run_tape(model, x, None)?;
    Ok(backward(model, &tape, upstream, None))
}

/// Gradient of the `target` logit with respect to the input series.
pub fn backward_input(model: &Model, x: &[f32], target: usize) -> Result<Vec<f32>> {
    if target >= model.classes() {
        return Err(Error::ShapeMismatch(format!(
            "class {target} outside [0, {})",
            model.classes()
        )));
    }
    let mut upstream = vec![0.0; model.classes()];
    upstream[target] = 1.0;
    Ok(input_gradient(model, x, &upstream)?
        .into_iter()
        .map(|g| g as f32)
        .collect())
}
