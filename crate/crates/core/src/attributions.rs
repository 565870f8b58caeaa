//! Local attribution methods: one relevance score per time point.
//!
//! Every method explains the model's predicted class unless an explicit
//! target is given. Values are signed except for saliency.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::nn::{backward_input, softmax, Model};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Saliency,
    GradInput,
    IntegratedGradients,
    Occlusion,
    Lime,
    ShapleySampling,
    Random,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Saliency,
        Method::GradInput,
        Method::IntegratedGradients,
        Method::Occlusion,
        Method::Lime,
        Method::ShapleySampling,
        Method::Random,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Saliency => "saliency",
            Method::GradInput => "grad_input",
            Method::IntegratedGradients => "integrated_gradients",
            Method::Occlusion => "occlusion",
            Method::Lime => "lime",
            Method::ShapleySampling => "shapley_sampling",
            Method::Random => "random",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::UnknownMethod(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OcclusionFill {
    #[default]
    Zero,
    GlobalMean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttributionParams {
    pub ig_steps: usize,
    pub ig_max_steps: usize,
    /// Defaults to `max(1, ceil(0.05 T))`.
    pub occlusion_window: Option<usize>,
    pub occlusion_stride: usize,
    pub occlusion_fill: OcclusionFill,
    pub lime_segments: usize,
    pub lime_samples: usize,
    pub lime_kernel_width: f64,
    pub lime_ridge: f64,
    pub shapley_segments: usize,
    pub shapley_permutations: usize,
    pub seed: u64,
    /// Training-split scalar mean, needed by the global-mean occlusion fill.
    pub global_mean: Option<f32>,
}

impl Default for AttributionParams {
    fn default() -> Self {
        Self {
            ig_steps: 50,
            ig_max_steps: 6400,
            occlusion_window: None,
            occlusion_stride: 1,
            occlusion_fill: OcclusionFill::Zero,
            lime_segments: 10,
            lime_samples: 1000,
            lime_kernel_width: 0.25,
            lime_ridge: 1.0,
            shapley_segments: 10,
            shapley_permutations: 500,
            seed: 0,
            global_mean: None,
        }
    }
}

impl AttributionParams {
    /// Parameter record of one method, as persisted next to its values.
    pub fn record(&self, method: Method, length: usize) -> Value {
        match method {
            Method::Saliency | Method::GradInput => json!({}),
            Method::IntegratedGradients => json!({
                "steps": self.ig_steps,
                "max_steps": self.ig_max_steps,
                "baseline": "zero",
            }),
            Method::Occlusion => json!({
                "window": self.occlusion_window.unwrap_or_else(|| default_window(length)),
                "stride": self.occlusion_stride,
                "fill": self.occlusion_fill,
            }),
            Method::Lime => json!({
                "segments": self.lime_segments,
                "samples": self.lime_samples,
                "kernel_width": self.lime_kernel_width,
                "ridge_lambda": self.lime_ridge,
                "seed": self.seed,
            }),
            Method::ShapleySampling => json!({
                "segments": self.shapley_segments,
                "permutations": self.shapley_permutations,
                "seed": self.seed,
            }),
            Method::Random => json!({"seed": self.seed}),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attribution {
    pub method: Method,
    pub values: Vec<f32>,
    pub target_class: usize,
    pub params: Value,
}

fn resolve_target(model: &Model, x: &[f32], target: Option<usize>) -> Result<usize> {
    match target {
        Some(t) if t >= model.classes() => Err(Error::ShapeMismatch(format!(
            "class {t} outside [0, {})",
            model.classes()
        ))),
        Some(t) => Ok(t),
        None => model.predict(x),
    }
}

fn logit(model: &Model, x: &[f32], class: usize) -> Result<f64> {
    Ok(f64::from(model.logits(x)?[class]))
}

pub fn default_window(length: usize) -> usize {
    ((0.05 * length as f64).ceil() as usize).max(1)
}

/// Absolute input gradient of the target logit.
pub fn saliency(model: &Model, x: &[f32], target: Option<usize>) -> Result<Attribution> {
    let target = resolve_target(model, x, target)?;
    let grad = backward_input(model, x, target)?;
    Ok(Attribution {
        method: Method::Saliency,
        values: grad.iter().map(|g| g.abs()).collect(),
        target_class: target,
        params: json!({}),
    })
}

/// Signed gradient times input.
pub fn grad_input(model: &Model, x: &[f32], target: Option<usize>) -> Result<Attribution> {
    let target = resolve_target(model, x, target)?;
    let grad = backward_input(model, x, target)?;
    Ok(Attribution {
        method: Method::GradInput,
        values: grad.iter().zip(x).map(|(g, v)| g * v).collect(),
        target_class: target,
        params: json!({}),
    })
}

/// Midpoint Riemann sum of gradients along the straight path from
/// `baseline` (zeros when `None`) to `x`, times `x - baseline`.
pub fn integrated_gradients(
    model: &Model,
    x: &[f32],
    baseline: Option<&[f32]>,
    steps: usize,
    target: Option<usize>,
) -> Result<Attribution> {
    if steps == 0 {
        return Err(Error::InvalidParams("integrated gradients needs at least one step".into()));
    }
    let target = resolve_target(model, x, target)?;
    let zeros = vec![0.0f32; x.len()];
    let baseline = baseline.unwrap_or(&zeros);
    if baseline.len() != x.len() {
        return Err(Error::ShapeMismatch(format!(
            "baseline length {} differs from series length {}",
            baseline.len(),
            x.len()
        )));
    }
    let mut total = vec![0.0f64; x.len()];
    let mut point = vec![0.0f32; x.len()];
    for k in 0..steps {
        let alpha = (k as f64 + 0.5) / steps as f64;
        for ((p, &xi), &bi) in point.iter_mut().zip(x).zip(baseline) {
            *p = (f64::from(bi) + alpha * (f64::from(xi) - f64::from(bi))) as f32;
        }
        let grad = backward_input(model, &point, target)?;
        for (acc, g) in total.iter_mut().zip(&grad) {
            *acc += f64::from(*g);
        }
    }
    let values = total
        .iter()
        .zip(x.iter().zip(baseline))
        .map(|(g, (&xi, &bi))| (g / steps as f64 * (f64::from(xi) - f64::from(bi))) as f32)
        .collect();
    Ok(Attribution {
        method: Method::IntegratedGradients,
        values,
        target_class: target,
        params: json!({"steps": steps}),
    })
}

/// Step-doubling schedule for integrated gradients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IgOptions {
    pub steps: usize,
    /// Doubling stops once the step count would exceed this.
    pub max_steps: usize,
    pub rtol: f64,
    pub atol: f64,
}

impl Default for IgOptions {
    fn default() -> Self {
        Self {
            steps: 50,
            max_steps: 6400,
            rtol: 1e-3,
            atol: 1e-4,
        }
    }
}

/// Integrated gradients that doubles the step count until the completeness
/// gap `|sum(values) - (f(x) - f(baseline))|` is within
/// `rtol * |f(x) - f(baseline)| + atol`, or `max_steps` is reached.
///
/// ReLU networks are piecewise linear along the path, so the midpoint rule
/// is only inexact on panels containing an activation switch; refining the
/// grid shrinks those panels.
pub fn integrated_gradients_adaptive(
    model: &Model,
    x: &[f32],
    baseline: Option<&[f32]>,
    options: &IgOptions,
    target: Option<usize>,
) -> Result<Attribution> {
    let target = resolve_target(model, x, target)?;
    let zeros = vec![0.0f32; x.len()];
    let base = baseline.unwrap_or(&zeros);
    let delta = logit(model, x, target)? - logit(model, base, target)?;
    let tolerance = options.rtol * delta.abs() + options.atol;
    let mut steps = options.steps.max(1);
    loop {
        let mut attr = integrated_gradients(model, x, Some(base), steps, Some(target))?;
        let total: f64 = attr.values.iter().map(|&v| f64::from(v)).sum();
        let gap = (total - delta).abs();
        if gap <= tolerance || steps * 2 > options.max_steps {
            attr.params = json!({"steps": steps, "completeness_gap": gap});
            return Ok(attr);
        }
        steps *= 2;
    }
}

/// Sliding-window occlusion. Each point receives the mean logit drop over
/// all windows that cover it.
pub fn occlusion(
    model: &Model,
    x: &[f32],
    window: usize,
    stride: usize,
    fill: f32,
    target: Option<usize>,
) -> Result<Attribution> {
    let n = x.len();
    if window == 0 || window > n || stride == 0 {
        return Err(Error::InvalidParams(format!(
            "occlusion window {window} / stride {stride} invalid for length {n}"
        )));
    }
    let target = resolve_target(model, x, target)?;
    let reference = logit(model, x, target)?;
    let mut starts: Vec<usize> = (0..=n - window).step_by(stride).collect();
    if *starts.last().expect("at least one window") != n - window {
        starts.push(n - window);
    }
    let mut sums = vec![0.0f64; n];
    let mut counts = vec![0usize; n];
    let mut occluded = x.to_vec();
    for start in starts {
        occluded[start..start + window].fill(fill);
        let delta = reference - logit(model, &occluded, target)?;
        occluded[start..start + window].copy_from_slice(&x[start..start + window]);
        for t in start..start + window {
            sums[t] += delta;
            counts[t] += 1;
        }
    }
    Ok(Attribution {
        method: Method::Occlusion,
        values: sums
            .iter()
            .zip(&counts)
            .map(|(s, &c)| (s / c as f64) as f32)
            .collect(),
        target_class: target,
        params: json!({"window": window, "stride": stride, "fill": fill}),
    })
}

/// Splits `[0, len)` into `count` contiguous, near-equal segments.
pub fn segments(len: usize, count: usize) -> Result<Vec<Range<usize>>> {
    if count == 0 || count > len {
        return Err(Error::InvalidParams(format!(
            "{count} segments cannot partition length {len}"
        )));
    }
    Ok((0..count)
        .map(|i| (i * len / count)..((i + 1) * len / count))
        .collect())
}

fn series_mean(x: &[f32]) -> f32 {
    (x.iter().map(|&v| f64::from(v)).sum::<f64>() / x.len() as f64) as f32
}

fn masked(x: &[f32], segs: &[Range<usize>], keep: &[bool], fill: f32) -> Vec<f32> {
    let mut out = x.to_vec();
    for (seg, &k) in segs.iter().zip(keep) {
        if !k {
            out[seg.clone()].fill(fill);
        }
    }
    out
}

fn broadcast(len: usize, segs: &[Range<usize>], per_segment: &[f64]) -> Vec<f32> {
    let mut values = vec![0.0f32; len];
    for (seg, &v) in segs.iter().zip(per_segment) {
        values[seg.clone()].fill(v as f32);
    }
    values
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LimeParams {
    pub segments: usize,
    pub samples: usize,
    pub kernel_width: f64,
    pub ridge_lambda: f64,
    pub seed: u64,
}

impl Default for LimeParams {
    fn default() -> Self {
        Self {
            segments: 10,
            samples: 1000,
            kernel_width: 0.25,
            ridge_lambda: 1.0,
            seed: 0,
        }
    }
}

/// Weighted ridge surrogate over segment masks. The first mask is the
/// unperturbed sample; the rest are uniform random. Masked segments take
/// the sample's own mean, the response is the target-class probability.
pub fn lime(model: &Model, x: &[f32], params: &LimeParams, target: Option<usize>) -> Result<Attribution> {
    let target = resolve_target(model, x, target)?;
    let segs = segments(x.len(), params.segments)?;
    if params.samples == 0 {
        return Err(Error::InvalidParams("LIME needs at least one sample".into()));
    }
    let s = segs.len();
    let fill = series_mean(x);
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut masks = Vec::with_capacity(params.samples);
    masks.push(vec![true; s]);
    while masks.len() < params.samples {
        masks.push((0..s).map(|_| rng.random::<bool>()).collect::<Vec<bool>>());
    }
    if masks.iter().all(|m| m == &masks[0]) {
        return Err(Error::DegenerateDesign);
    }

    let responses = masks
        .iter()
        .map(|m| {
            let logits = model.logits(&masked(x, &segs, m, fill))?;
            Ok(f64::from(softmax(&logits)[target]))
        })
        .collect::<Result<Vec<f64>>>()?;
    let weights: Vec<f64> = masks
        .iter()
        .map(|m| {
            let on = m.iter().filter(|&&b| b).count() as f64;
            let cos = (on / s as f64).sqrt();
            (-(1.0 - cos).powi(2) / params.kernel_width.powi(2)).exp()
        })
        .collect();

    let wsum: f64 = weights.iter().sum();
    let z_mean: Vec<f64> = (0..s)
        .map(|j| {
            masks
                .iter()
                .zip(&weights)
                .map(|(m, w)| if m[j] { *w } else { 0.0 })
                .sum::<f64>()
                / wsum
        })
        .collect();
    let y_mean = responses.iter().zip(&weights).map(|(y, w)| y * w).sum::<f64>() / wsum;

    let mut gram = DMatrix::<f64>::zeros(s, s);
    let mut rhs = DVector::<f64>::zeros(s);
    for ((m, &y), &w) in masks.iter().zip(&responses).zip(&weights) {
        let zc: Vec<f64> = (0..s).map(|j| f64::from(u8::from(m[j])) - z_mean[j]).collect();
        let yc = y - y_mean;
        for a in 0..s {
            rhs[a] += w * zc[a] * yc;
            for b in 0..s {
                gram[(a, b)] += w * zc[a] * zc[b];
            }
        }
    }
    for a in 0..s {
        gram[(a, a)] += params.ridge_lambda;
    }
    let coef = gram
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::NonFinite("singular LIME design".into()))?;
    let coef: Vec<f64> = coef.iter().copied().collect();
    Ok(Attribution {
        method: Method::Lime,
        values: broadcast(x.len(), &segs, &coef),
        target_class: target,
        params: serde_json::to_value(params).expect("plain struct"),
    })
}

/// Monte-Carlo Shapley estimate per segment with its standard error.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapleyEstimate {
    pub values: Vec<f64>,
    pub std_err: Vec<f64>,
}

/// Permutation-sampling Shapley values over `segs`. `value` scores a
/// series in which absent segments hold `fill`.
pub fn shapley_permutation_estimate(
    x: &[f32],
    segs: &[Range<usize>],
    fill: f32,
    permutations: usize,
    seed: u64,
    value: impl Fn(&[f32]) -> Result<f64>,
) -> Result<ShapleyEstimate> {
    if permutations == 0 {
        return Err(Error::InvalidParams("at least one permutation required".into()));
    }
    let s = segs.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..s).collect();
    let mut sum = vec![0.0f64; s];
    let mut sum_sq = vec![0.0f64; s];
    let empty = masked(x, segs, &vec![false; s], fill);
    let v_empty = value(&empty)?;
    for _ in 0..permutations {
        order.shuffle(&mut rng);
        let mut current = empty.clone();
        let mut prev = v_empty;
        for &j in &order {
            current[segs[j].clone()].copy_from_slice(&x[segs[j].clone()]);
            let v = value(&current)?;
            let contribution = v - prev;
            sum[j] += contribution;
            sum_sq[j] += contribution * contribution;
            prev = v;
        }
    }
    let n = permutations as f64;
    let values: Vec<f64> = sum.iter().map(|v| v / n).collect();
    let std_err = values
        .iter()
        .zip(&sum_sq)
        .map(|(mean, sq)| ((sq / n - mean * mean).max(0.0) / n).sqrt())
        .collect();
    Ok(ShapleyEstimate { values, std_err })
}

/// Shapley sampling over contiguous segments; absent segments are replaced
/// by the sample mean and the value function is the target logit.
pub fn shapley_sampling(
    model: &Model,
    x: &[f32],
    segment_count: usize,
    permutations: usize,
    seed: u64,
    target: Option<usize>,
) -> Result<Attribution> {
    let target = resolve_target(model, x, target)?;
    let segs = segments(x.len(), segment_count)?;
    let est = shapley_permutation_estimate(x, &segs, series_mean(x), permutations, seed, |s| {
        logit(model, s, target)
    })?;
    Ok(Attribution {
        method: Method::ShapleySampling,
        values: broadcast(x.len(), &segs, &est.values),
        target_class: target,
        params: json!({"segments": segment_count, "permutations": permutations, "seed": seed}),
    })
}

/// Uniform `[0, 1)` relevance, the baseline every method has to beat.
pub fn random(length: usize, seed: u64) -> Attribution {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Attribution {
        method: Method::Random,
        values: (0..length).map(|_| rng.random::<f32>()).collect(),
        target_class: 0,
        params: json!({"seed": seed}),
    }
}

/// Computes one method for one sample. `stream` decorrelates the seeds of
/// different samples (use the dataset index).
pub fn attribute(
    model: &Model,
    x: &[f32],
    method: Method,
    params: &AttributionParams,
    stream: u64,
) -> Result<Attribution> {
    let sample_seed = seed::derive(params.seed, stream);
    let mut attr = match method {
        Method::Saliency => saliency(model, x, None),
        Method::GradInput => grad_input(model, x, None),
        Method::IntegratedGradients => integrated_gradients_adaptive(
            model,
            x,
            None,
            &IgOptions {
                steps: params.ig_steps,
                max_steps: params.ig_max_steps,
                ..IgOptions::default()
            },
            None,
        ),
        Method::Occlusion => {
            let fill = match params.occlusion_fill {
                OcclusionFill::Zero => 0.0,
                OcclusionFill::GlobalMean => params
                    .global_mean
                    .ok_or(Error::MissingContext("occlusion global-mean fill needs the dataset mean"))?,
            };
            let window = params.occlusion_window.unwrap_or_else(|| default_window(x.len()));
            occlusion(model, x, window, params.occlusion_stride, fill, None)
        }
        Method::Lime => lime(
            model,
            x,
            &LimeParams {
                segments: params.lime_segments,
                samples: params.lime_samples,
                kernel_width: params.lime_kernel_width,
                ridge_lambda: params.lime_ridge,
                seed: sample_seed,
            },
            None,
        ),
        Method::ShapleySampling => shapley_sampling(
            model,
            x,
            params.shapley_segments,
            params.shapley_permutations,
            sample_seed,
            None,
        ),
        Method::Random => {
            let mut a = random(x.len(), sample_seed);
            a.target_class = model.predict(x)?;
            Ok(a)
        }
    }?;
    if attr.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("{method} produced a non-finite attribution")));
    }
    attr.params = params.record(method, x.len());
    Ok(attr)
}

/// All attributions of one method over the requested samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodColumn {
    pub params: Value,
    /// Dataset index of each row.
    pub samples: Vec<usize>,
    pub targets: Vec<usize>,
    pub values: Vec<Vec<f32>>,
    /// Population standard deviation of each row.
    pub std: Vec<f32>,
}

impl MethodColumn {
    pub fn row_of(&self, sample: usize) -> Option<usize> {
        self.samples.iter().position(|&s| s == sample)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AttributionMatrix {
    pub methods: BTreeMap<Method, MethodColumn>,
}

impl AttributionMatrix {
    pub fn get(&self, method: Method) -> Option<&MethodColumn> {
        self.methods.get(&method)
    }
}

pub fn population_std(values: &[f32]) -> f32 {
    if values.is_empty() {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().map(|&v| f64::from(v)).sum::<f64>() / n;
    (values.iter().map(|&v| (f64::from(v) - mean).powi(2)).sum::<f64>() / n).sqrt() as f32
}

/// Attributions for every `(index, series)` pair and method. Rows are
/// computed in parallel and keyed by the sample index, so the result does
/// not depend on scheduling. `progress` is called once per finished method.
pub fn build_attribution_matrix(
    model: &Model,
    samples: &[(usize, &[f32])],
    methods: &[Method],
    params: &AttributionParams,
    progress: Option<&(dyn Fn(Method) + Sync)>,
) -> Result<AttributionMatrix> {
    let mut matrix = AttributionMatrix::default();
    let length = samples.first().map_or(model.input_length(), |s| s.1.len());
    for &method in methods {
        let rows = samples
            .par_iter()
            .map(|&(idx, x)| attribute(model, x, method, params, idx as u64))
            .collect::<Result<Vec<_>>>()?;
        let column = MethodColumn {
            params: params.record(method, length),
            samples: samples.iter().map(|s| s.0).collect(),
            targets: rows.iter().map(|a| a.target_class).collect(),
            std: rows.iter().map(|a| population_std(&a.values)).collect(),
            values: rows.into_iter().map(|a| a.values).collect(),
        };
        matrix.methods.insert(method, column);
        if let Some(report) = progress {
            report(method);
        }
    }
    Ok(matrix)
}
