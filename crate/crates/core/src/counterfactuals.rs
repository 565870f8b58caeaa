//! Class-flipping modifications of a sample: subsequence transplantation
//! from the nearest unlike neighbour, and gradient search on a hinge loss.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{argmax, input_gradient, Model};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CfMethod {
    Native,
    Wachter,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Counterfactual {
    pub origin_index: Option<usize>,
    pub series: Vec<f32>,
    pub origin_class: usize,
    pub predicted_class: usize,
    pub method: CfMethod,
    pub changed_mask: Vec<bool>,
    pub l1: f64,
    pub l2: f64,
    /// Native guide ran out of window and returned the neighbour itself.
    pub degenerate: bool,
    /// Dataset index of the neighbour used as guide.
    pub guide_index: Option<usize>,
    pub iterations: usize,
}

fn distances(a: &[f32], b: &[f32]) -> (f64, f64) {
    a.iter().zip(b).fold((0.0, 0.0), |(l1, l2), (&x, &y)| {
        let d = f64::from(x) - f64::from(y);
        (l1 + d.abs(), l2 + d * d)
    })
}

fn l2(a: &[f32], b: &[f32]) -> f64 {
    distances(a, b).1.sqrt()
}

/// Series a neighbour may be drawn from, with the model's predictions.
#[derive(Debug, Clone, Copy)]
pub struct Candidates<'a> {
    pub indices: &'a [usize],
    pub series: &'a [Vec<f32>],
    pub preds: &'a [usize],
}

/// Closest candidate (Euclidean) predicted differently from `query_pred`;
/// ties go to the lowest dataset index. Returns `(index, distance)`.
pub fn nearest_unlike_neighbor(candidates: Candidates<'_>, query: &[f32], query_pred: usize) -> Result<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for ((&index, series), &pred) in candidates.indices.iter().zip(candidates.series).zip(candidates.preds) {
        if pred == query_pred {
            continue;
        }
        if series.len() != query.len() {
            return Err(Error::DimensionMismatch {
                expected: query.len(),
                found: series.len(),
            });
        }
        let d = l2(series, query);
        let better = match best {
            None => true,
            Some((bi, bd)) => d < bd || (d == bd && index < bi),
        };
        if better {
            best = Some((index, d));
        }
    }
    best.ok_or(Error::NoUnlikeNeighbor)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NativeGuideParams {
    /// Defaults to `ceil(T / 10)`.
    pub window: Option<usize>,
    /// Growth per side; defaults to `ceil(T / 20)`.
    pub grow: Option<usize>,
}

/// Start of the length-`window` span with the largest summed `|attribution|`.
pub fn max_attribution_window(attribution: &[f32], window: usize) -> usize {
    let window = window.clamp(1, attribution.len().max(1));
    let mut sum: f64 = attribution[..window].iter().map(|v| f64::from(v.abs())).sum();
    let (mut best, mut best_sum) = (0, sum);
    for start in 1..=attribution.len() - window {
        sum += f64::from(attribution[start + window - 1].abs()) - f64::from(attribution[start - 1].abs());
        if sum > best_sum {
            best = start;
            best_sum = sum;
        }
    }
    best
}

/// Replaces the most attributed window of `query` with the guide's values,
/// growing it symmetrically until the prediction flips. `changed_mask`
/// marks the transplanted window.
pub fn native_guide_cf(
    model: &Model,
    query: &[f32],
    attribution: &[f32],
    guide: &[f32],
    params: &NativeGuideParams,
) -> Result<Counterfactual> {
    let len = query.len();
    if attribution.len() != len || guide.len() != len {
        return Err(Error::ShapeMismatch(format!(
            "query, attribution and guide lengths differ ({len}, {}, {})",
            attribution.len(),
            guide.len()
        )));
    }
    let origin_class = model.predict(query)?;
    if model.predict(guide)? == origin_class {
        return Err(Error::InvalidParams("guide is predicted as the query's class".into()));
    }
    let window = params.window.unwrap_or_else(|| len.div_ceil(10)).clamp(1, len);
    let grow = params.grow.unwrap_or_else(|| len.div_ceil(20)).max(1);
    let mut start = max_attribution_window(attribution, window);
    let mut end = start + window;
    let mut iterations = 0;
    loop {
        iterations += 1;
        let mut series = query.to_vec();
        series[start..end].copy_from_slice(&guide[start..end]);
        let predicted_class = model.predict(&series)?;
        let full = start == 0 && end == len;
        if predicted_class != origin_class || full {
            let (l1, l2sq) = distances(query, &series);
            return Ok(Counterfactual {
                origin_index: None,
                changed_mask: (0..len).map(|t| t >= start && t < end).collect(),
                series,
                origin_class,
                predicted_class,
                method: CfMethod::Native,
                l1,
                l2: l2sq.sqrt(),
                degenerate: full,
                guide_index: None,
                iterations,
            });
        }
        start = start.saturating_sub(grow);
        end = (end + grow).min(len);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WachterParams {
    pub lambda0: f64,
    pub lambda_mult: f64,
    pub inner_iters: usize,
    pub max_iters: usize,
    pub learning_rate: f64,
}

impl Default for WachterParams {
    fn default() -> Self {
        Self {
            lambda0: 0.1,
            lambda_mult: 2.0,
            inner_iters: 100,
            max_iters: 2000,
            learning_rate: 0.01,
        }
    }
}

/// Adam on `lambda * max(0, margin) + |x' - x|_1` with
/// `margin = max_{c != target} logit_c - logit_target`; `lambda` is
/// multiplied every `inner_iters` steps. Returns the first iterate predicted
/// as `target`.
pub fn wachter_cf(model: &Model, query: &[f32], target: usize, params: &WachterParams) -> Result<Counterfactual> {
    if target >= model.classes() {
        return Err(Error::InvalidParams(format!("target class {target} outside [0, {})", model.classes())));
    }
    let origin_class = model.predict(query)?;
    if origin_class == target {
        return Err(Error::InvalidParams(format!("query is already predicted as class {target}")));
    }
    if params.inner_iters == 0 || !(params.learning_rate > 0.0) {
        return Err(Error::InvalidParams("inner_iters and learning_rate must be positive".into()));
    }
    let (beta1, beta2, eps) = (0.9f64, 0.999f64, 1e-8f64);
    let len = query.len();
    let mut x: Vec<f64> = query.iter().map(|&v| f64::from(v)).collect();
    let mut m = vec![0.0f64; len];
    let mut v = vec![0.0f64; len];
    let mut lambda = params.lambda0;
    for iter in 1..=params.max_iters {
        let current: Vec<f32> = x.iter().map(|&v| v as f32).collect();
        let logits = model.logits(&current)?;
        let rival = (0..logits.len())
            .filter(|&c| c != target)
            .max_by(|&a, &b| logits[a].total_cmp(&logits[b]).then(b.cmp(&a)))
            .expect("at least two classes");
        let margin = f64::from(logits[rival]) - f64::from(logits[target]);
        let mut grad = vec![0.0f64; len];
        if margin >= 0.0 {
            let mut upstream = vec![0.0f64; logits.len()];
            upstream[rival] = lambda;
            upstream[target] = -lambda;
            grad = input_gradient(model, &current, &upstream)?;
        }
        for (t, g) in grad.iter_mut().enumerate() {
            let diff = x[t] - f64::from(query[t]);
            if diff != 0.0 {
                *g += diff.signum();
            }
        }
        let bias1 = 1.0 - beta1.powi(iter as i32);
        let bias2 = 1.0 - beta2.powi(iter as i32);
        for t in 0..len {
            m[t] = beta1 * m[t] + (1.0 - beta1) * grad[t];
            v[t] = beta2 * v[t] + (1.0 - beta2) * grad[t] * grad[t];
            x[t] -= params.learning_rate * (m[t] / bias1) / ((v[t] / bias2).sqrt() + eps);
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("counterfactual search diverged".into()));
        }
        let series: Vec<f32> = x.iter().map(|&v| v as f32).collect();
        let logits = model.logits(&series)?;
        if argmax(&logits) == target {
            let (l1, l2sq) = distances(query, &series);
            return Ok(Counterfactual {
                origin_index: None,
                changed_mask: series
                    .iter()
                    .zip(query)
                    .map(|(a, b)| (f64::from(*a) - f64::from(*b)).abs() > 1e-6)
                    .collect(),
                series,
                origin_class,
                predicted_class: target,
                method: CfMethod::Wachter,
                l1,
                l2: l2sq.sqrt(),
                degenerate: false,
                guide_index: None,
                iterations: iter,
            });
        }
        if iter % params.inner_iters == 0 {
            lambda *= params.lambda_mult;
        }
    }
    Err(Error::NoFlipWithinBudget {
        iters: params.max_iters,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Layer;
    use proptest::prelude::*;

    /// Class 1 iff `x[at] > 0`.
    fn selector(len: usize, at: usize) -> Model {
        let mut weights = vec![0.0; 2 * len];
        weights[at] = -1.0;
        weights[len + at] = 1.0;
        Model::new(
            len,
            2,
            vec![Layer::Dense {
                inputs: len,
                outputs: 2,
                weights,
                bias: vec![0.0; 2],
            }],
        )
        .unwrap()
    }

    /// Logits `(0, 3x)`.
    fn logistic_toy() -> Model {
        Model::new(
            1,
            2,
            vec![Layer::Dense {
                inputs: 1,
                outputs: 2,
                weights: vec![0.0, 3.0],
                bias: vec![0.0; 2],
            }],
        )
        .unwrap()
    }

    #[test]
    fn nun_rules() {
        let series = vec![vec![0.0, 0.0], vec![3.0, 0.0], vec![0.0, 3.0], vec![1.0, 1.0]];
        let indices = [10, 11, 12, 13];
        let c = Candidates {
            indices: &indices,
            series: &series,
            preds: &[1, 0, 0, 1],
        };
        assert_eq!(nearest_unlike_neighbor(c, &[0.0, 0.0], 1).unwrap(), (11, 3.0));
        assert_eq!(nearest_unlike_neighbor(c, &[3.0, 0.0], 1).unwrap(), (11, 0.0));
        let only = Candidates {
            preds: &[1, 1, 0, 1],
            ..c
        };
        assert_eq!(nearest_unlike_neighbor(only, &[0.0, 0.0], 1).unwrap().0, 12);
        let none = Candidates {
            preds: &[1, 1, 1, 1],
            ..c
        };
        assert_eq!(nearest_unlike_neighbor(none, &[0.0, 0.0], 1), Err(Error::NoUnlikeNeighbor));
    }

    #[test]
    fn window_search() {
        assert_eq!(max_attribution_window(&[0.1, -0.2, 3.0, 0.0, 0.5], 2), 1);
        assert_eq!(max_attribution_window(&[1.0; 6], 3), 0);
        assert_eq!(max_attribution_window(&[0.0, 0.0, 0.0, 1.0], 1), 3);
    }

    #[test]
    fn native_guide_flips_with_first_window() {
        let len = 20;
        let model = selector(len, 5);
        let query: Vec<f32> = (0..len).map(|t| if t == 5 { -1.0 } else { 0.3 }).collect();
        let guide: Vec<f32> = (0..len).map(|t| if t == 5 { 2.0 } else { -0.7 }).collect();
        let mut attribution = vec![0.0; len];
        attribution[5] = 1.0;
        let cf = native_guide_cf(&model, &query, &attribution, &guide, &NativeGuideParams::default()).unwrap();
        assert_eq!(cf.iterations, 1);
        assert!(!cf.degenerate);
        assert_eq!(cf.predicted_class, 1);
        assert_eq!(model.predict(&cf.series).unwrap(), 1);
        assert!(cf.changed_mask.iter().filter(|&&c| c).count() <= len.div_ceil(10));
        assert!(cf.changed_mask[5]);
    }

    #[test]
    fn native_guide_exhaustion_is_degenerate() {
        let len = 10;
        let model = selector(len, 9);
        let query = vec![-1.0f32; len];
        let guide: Vec<f32> = (0..len).map(|t| if t == 9 { 1.0 } else { 0.0 }).collect();
        // Attribution points away from the decisive index, so growth must reach it.
        let mut attribution = vec![0.0; len];
        attribution[0] = 1.0;
        let cf = native_guide_cf(
            &model,
            &query,
            &attribution,
            &guide,
            &NativeGuideParams {
                window: Some(1),
                grow: Some(20),
            },
        )
        .unwrap();
        assert!(cf.degenerate);
        assert_eq!(cf.series, guide);
        assert_eq!(cf.predicted_class, 1);
        assert!(cf.changed_mask.iter().all(|&c| c));
    }

    #[test]
    fn wachter_crosses_boundary_just_past_zero() {
        let cf = wachter_cf(&logistic_toy(), &[-1.0], 1, &WachterParams::default()).unwrap();
        assert!(cf.series[0] > 0.0);
        let moved = (cf.series[0] + 1.0).abs();
        assert!((1.0..=1.2).contains(&moved), "moved {moved}");
        assert_eq!(cf.changed_mask, vec![true]);
        assert_eq!(logistic_toy().predict(&cf.series).unwrap(), 1);
    }

    #[test]
    fn wachter_preconditions() {
        assert!(matches!(
            wachter_cf(&logistic_toy(), &[-1.0], 0, &WachterParams::default()),
            Err(Error::InvalidParams(_))
        ));
        let constant = Model::new(
            2,
            2,
            vec![Layer::Dense {
                inputs: 2,
                outputs: 2,
                weights: vec![0.0; 4],
                bias: vec![1.0, 0.0],
            }],
        )
        .unwrap();
        assert_eq!(
            wachter_cf(&constant, &[0.5, 0.5], 1, &WachterParams::default()),
            Err(Error::NoFlipWithinBudget { iters: 2000 })
        );
    }

    proptest! {
        #[test]
        fn native_guide_distance_bound(
            query in proptest::collection::vec(-2.0f32..2.0, 12),
            guide in proptest::collection::vec(-2.0f32..2.0, 12),
            attribution in proptest::collection::vec(-1.0f32..1.0, 12),
            at in 0usize..12,
        ) {
            let model = selector(12, at);
            let mut query = query;
            let mut guide = guide;
            query[at] = -query[at].abs() - 0.1;
            guide[at] = guide[at].abs() + 0.1;
            let cf = native_guide_cf(&model, &query, &attribution, &guide, &NativeGuideParams::default()).unwrap();
            prop_assert!(cf.l2 <= l2(&query, &guide) + 1e-9);
            prop_assert_eq!(model.predict(&cf.series).unwrap(), cf.predicted_class);
            prop_assert!(cf.predicted_class != cf.origin_class || cf.degenerate);
            let first = cf.changed_mask.iter().position(|&c| c).unwrap();
            let last = cf.changed_mask.iter().rposition(|&c| c).unwrap();
            prop_assert!(cf.changed_mask[first..=last].iter().all(|&c| c));
            for t in 0..12 {
                if !cf.changed_mask[t] {
                    prop_assert_eq!(cf.series[t].to_bits(), query[t].to_bits());
                }
            }
        }
    }
}
