//! Independent `f64` reference implementation of the layer stack, used as a
//! finite-difference oracle. Shares nothing with the engine's forward pass
//! beyond the public layer description.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tsexplain_core::nn::{Layer, Model, ModelBuilder};

/// Logits in `f64` plus the piecewise-linear region the input falls in
/// (ReLU signs and max-pool winners).
pub fn reference_forward(model: &Model, x: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let mut cur = x.to_vec();
    let mut channels = 1usize;
    let mut len = x.len();
    let mut region = Vec::new();
    for layer in model.layers() {
        match layer {
            Layer::Conv1d {
                in_channels,
                out_channels,
                kernel,
                weights,
                bias,
            } => {
                let out_len = len - kernel + 1;
                let mut next = vec![0.0; out_channels * out_len];
                for o in 0..*out_channels {
                    for t in 0..out_len {
                        let mut acc = bias[o] as f64;
                        for i in 0..*in_channels {
                            for k in 0..*kernel {
                                acc += weights[(o * in_channels + i) * kernel + k] as f64 * cur[i * len + t + k];
                            }
                        }
                        next[o * out_len + t] = acc;
                    }
                }
                cur = next;
                channels = *out_channels;
                len = out_len;
            }
            Layer::Relu => {
                for v in cur.iter_mut() {
                    region.push(usize::from(*v > 0.0));
                    *v = v.max(0.0);
                }
            }
            Layer::MaxPool1d { size } => {
                let out_len = len / size;
                let mut next = Vec::with_capacity(channels * out_len);
                for c in 0..channels {
                    for j in 0..out_len {
                        let window = &cur[c * len + j * size..c * len + (j + 1) * size];
                        let (arg, best) = window
                            .iter()
                            .enumerate()
                            .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
                        region.push(arg);
                        next.push(best);
                    }
                }
                cur = next;
                len = out_len;
            }
            Layer::Flatten => {
                len *= channels;
                channels = 1;
            }
            Layer::Dense {
                inputs,
                outputs,
                weights,
                bias,
            } => {
                cur = (0..*outputs)
                    .map(|o| {
                        (0..*inputs).fold(bias[o] as f64, |acc, i| acc + weights[o * inputs + i] as f64 * cur[i])
                    })
                    .collect();
                channels = 1;
                len = *outputs;
            }
            Layer::Dropout { .. } => {}
        }
    }
    (cur, region)
}

/// Central differences of one logit. Returns `None` for coordinates whose
/// stencil straddles a ReLU or max-pool switch, where the derivative does
/// not exist.
pub fn central_difference(model: &Model, x: &[f32], class: usize, h: f64) -> Vec<Option<f64>> {
    let base: Vec<f64> = x.iter().map(|&v| v as f64).collect();
    let (_, region) = reference_forward(model, &base);
    (0..x.len())
        .map(|i| {
            let mut plus = base.clone();
            plus[i] += h;
            let mut minus = base.clone();
            minus[i] -= h;
            let (lp, rp) = reference_forward(model, &plus);
            let (lm, rm) = reference_forward(model, &minus);
            (rp == region && rm == region).then(|| (lp[class] - lm[class]) / (2.0 * h))
        })
        .collect()
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Random small conv net: conv/relu/pool blocks, dense head.
pub fn random_conv_net(seed: u64, length: usize) -> Model {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let filters = rng.random_range(2..5);
    let kernel = rng.random_range(2..6);
    let pool = rng.random_range(2..4);
    let hidden = rng.random_range(4..12);
    let classes = rng.random_range(2..4);
    let mut model = ModelBuilder::new(length, classes)
        .conv1d(filters, kernel)
        .relu()
        .max_pool(pool)
        .conv1d(filters + 1, 3)
        .relu()
        .flatten()
        .dense(hidden)
        .relu()
        .dropout(0.5)
        .dense(classes)
        .build(seed)
        .expect("valid random architecture");
    // Non-zero biases so that ReLU regions are not aligned with the origin.
    let layers: Vec<Layer> = model
        .layers()
        .iter()
        .cloned()
        .map(|l| match l {
            Layer::Conv1d {
                in_channels,
                out_channels,
                kernel,
                weights,
                bias,
            } => Layer::Conv1d {
                in_channels,
                out_channels,
                kernel,
                weights,
                bias: bias.iter().map(|_| rng.random_range(-0.2..0.2)).collect(),
            },
            Layer::Dense {
                inputs,
                outputs,
                weights,
                bias,
            } => Layer::Dense {
                inputs,
                outputs,
                weights,
                bias: bias.iter().map(|_| rng.random_range(-0.2..0.2)).collect(),
            },
            other => other,
        })
        .collect();
    model = Model::new(length, model.classes(), layers).expect("same shapes");
    model
}

pub fn random_series(seed: u64, length: usize) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5);
    let phase: f32 = rng.random_range(0.0..6.0);
    (0..length)
        .map(|t| (t as f32 * 0.3 + phase).sin() + rng.random_range(-0.5..0.5))
        .collect()
}

/// Exact Shapley values over `segs` by enumerating all coalitions. Absent
/// segments hold `fill`.
pub fn enumerated_shapley(x: &[f32], segs: &[std::ops::Range<usize>], fill: f32, value: impl Fn(&[f32]) -> f64) -> Vec<f64> {
    let s = segs.len();
    let coalition_value = |mask: usize| {
        let mut series = x.to_vec();
        for (j, seg) in segs.iter().enumerate() {
            if mask & (1 << j) == 0 {
                series[seg.clone()].fill(fill);
            }
        }
        value(&series)
    };
    let values: Vec<f64> = (0..1usize << s).map(coalition_value).collect();
    let factorial = |n: usize| (1..=n).map(|k| k as f64).product::<f64>();
    (0..s)
        .map(|i| {
            (0..1usize << s)
                .filter(|m| m & (1 << i) == 0)
                .map(|m| {
                    let size = m.count_ones() as usize;
                    let weight = factorial(size) * factorial(s - size - 1) / factorial(s);
                    weight * (values[m | (1 << i)] - values[m])
                })
                .sum()
        })
        .collect()
}

/// Model whose class-1 logit is `sum_i w_i * mean(segment i)`; class 0 is
/// pinned far below so class 1 is always predicted.
pub fn additive_segment_model(length: usize, segs: &[std::ops::Range<usize>], w: &[f32]) -> Model {
    let mut weights = vec![0.0f32; 2 * length];
    for (seg, &wi) in segs.iter().zip(w) {
        for t in seg.clone() {
            weights[length + t] = wi / seg.len() as f32;
        }
    }
    Model::new(
        length,
        2,
        vec![Layer::Dense {
            inputs: length,
            outputs: 2,
            weights,
            bias: vec![-100.0, 0.0],
        }],
    )
    .unwrap()
}
