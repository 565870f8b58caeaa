//! Edit operations of the local what-if loop and neighbour retrieval.
//!
//! Every edit returns a new series and leaves coordinates outside its
//! range bitwise untouched.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attributions::{attribute, AttributionMatrix, AttributionParams, Method};
use crate::error::{Error, Result};
use crate::nn::{activation_maximization, activation_vector, ActMaxParams, Model};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum RegionOp {
    Actmax { class: usize },
    GlobalMean,
    LocalMean,
    Inverse,
    MovingAvg { k: usize },
    ExpSmooth { alpha: f32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EditOp {
    Drag { t: usize, value: f32, radius: usize },
    Region { a: usize, b: usize, op: RegionOp },
}

/// What region edits may need beyond the series itself.
#[derive(Debug, Clone, Default)]
pub struct EditContext<'a> {
    pub model: Option<&'a Model>,
    /// Scalar mean over all training values.
    pub global_mean: Option<f32>,
    /// Per-class mean training series, the activation-maximization start.
    pub class_means: Option<&'a [Option<Vec<f32>>]>,
    pub actmax: ActMaxParams,
}

/// Adds `value - series[t]` under a Gaussian of standard deviation
/// `max(radius, 1) / 2` truncated to `t +- radius`.
pub fn drag_edit(series: &[f32], t: usize, value: f32, radius: usize) -> Result<Vec<f32>> {
    if t >= series.len() {
        return Err(Error::IndexOutOfRange { index: t, len: series.len() });
    }
    if !value.is_finite() {
        return Err(Error::InvalidParams(format!("drag target {value} is not finite")));
    }
    let mut out = series.to_vec();
    let delta = f64::from(value) - f64::from(series[t]);
    let sigma = radius.max(1) as f64 / 2.0;
    let lo = t.saturating_sub(radius);
    let hi = (t + radius).min(series.len() - 1);
    for (i, v) in out.iter_mut().enumerate().take(hi + 1).skip(lo) {
        let offset = i as f64 - t as f64;
        *v = (f64::from(*v) + delta * (-offset * offset / (2.0 * sigma * sigma)).exp()) as f32;
    }
    out[t] = value;
    Ok(out)
}

pub fn region_edit(series: &[f32], a: usize, b: usize, op: RegionOp, ctx: &EditContext<'_>) -> Result<Vec<f32>> {
    let len = series.len();
    if b >= len {
        return Err(Error::IndexOutOfRange { index: b, len });
    }
    if a > b {
        return Err(Error::InvalidParams(format!("region start {a} after end {b}")));
    }
    let mut out = series.to_vec();
    let region = &mut out[a..=b];
    match op {
        RegionOp::Actmax { class } => {
            let model = ctx.model.ok_or(Error::MissingContext("model"))?;
            if class >= model.classes() {
                return Err(Error::InvalidParams(format!("class {class} outside [0, {})", model.classes())));
            }
            let init = ctx
                .class_means
                .and_then(|m| m.get(class).cloned().flatten())
                .unwrap_or_else(|| vec![0.0; model.input_length()]);
            let synthetic = activation_maximization(model, class, &ctx.actmax, &init)?;
            if synthetic.len() != len {
                return Err(Error::ShapeMismatch(format!(
                    "model input length {} differs from series length {len}",
                    synthetic.len()
                )));
            }
            region.copy_from_slice(&synthetic[a..=b]);
        }
        RegionOp::GlobalMean => region.fill(ctx.global_mean.ok_or(Error::MissingContext("global mean"))?),
        RegionOp::LocalMean => {
            let mean = region.iter().map(|&v| f64::from(v)).sum::<f64>() / region.len() as f64;
            region.fill(mean as f32);
        }
        RegionOp::Inverse => region.iter_mut().for_each(|v| *v = -*v),
        RegionOp::MovingAvg { k } => {
            if k == 0 {
                return Err(Error::InvalidParams("moving average window must be at least 1".into()));
            }
            let before = (k - 1) / 2;
            let after = k / 2;
            for (offset, v) in region.iter_mut().enumerate() {
                let t = a + offset;
                let lo = t.saturating_sub(before).max(a);
                let hi = (t + after).min(b);
                let window = &series[lo..=hi];
                *v = (window.iter().map(|&x| f64::from(x)).sum::<f64>() / window.len() as f64) as f32;
            }
        }
        RegionOp::ExpSmooth { alpha } => {
            if !(alpha > 0.0 && alpha <= 1.0) {
                return Err(Error::InvalidParams(format!("smoothing factor {alpha} outside (0, 1]")));
            }
            let alpha = f64::from(alpha);
            let mut state = f64::from(series[a]);
            for (offset, v) in region.iter_mut().enumerate().skip(1) {
                state = alpha * f64::from(series[a + offset]) + (1.0 - alpha) * state;
                *v = state as f32;
            }
        }
    }
    Ok(out)
}

pub fn apply_edit(series: &[f32], edit: &EditOp, ctx: &EditContext<'_>) -> Result<Vec<f32>> {
    match *edit {
        EditOp::Drag { t, value, radius } => drag_edit(series, t, value, radius),
        EditOp::Region { a, b, op } => region_edit(series, a, b, op, ctx),
    }
}

/// Applies `edits` in order.
pub fn apply_edits(series: &[f32], edits: &[EditOp], ctx: &EditContext<'_>) -> Result<Vec<f32>> {
    edits.iter().try_fold(series.to_vec(), |s, e| apply_edit(&s, e, ctx))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Space {
    Euclidean,
    Activations,
    Attributions(Method),
}

impl fmt::Display for Space {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Space::Euclidean => f.write_str("euclidean"),
            Space::Activations => f.write_str("activations"),
            Space::Attributions(m) => write!(f, "attributions:{m}"),
        }
    }
}

/// `euclidean`, `activations` or `attributions:<method>`.
impl FromStr for Space {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euclidean" => Ok(Space::Euclidean),
            "activations" => Ok(Space::Activations),
            _ => match s.strip_prefix("attributions:") {
                Some(method) => Ok(Space::Attributions(method.parse()?)),
                None => Err(Error::InvalidParams(format!("unknown neighbour space {s:?}"))),
            },
        }
    }
}

impl Serialize for Space {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Space {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(deserializer)?.parse().map_err(serde::de::Error::custom)
    }
}

/// Searchable samples: dataset indices with their series.
#[derive(Debug, Clone, Copy)]
pub struct Pool<'a> {
    pub indices: &'a [usize],
    pub series: &'a [Vec<f32>],
}

#[derive(Debug, Clone, Copy)]
pub enum Query<'a> {
    /// A pool member; it is excluded from its own neighbours.
    Index(usize),
    Series(&'a [f32]),
}

#[derive(Debug, Clone, Copy)]
pub struct NeighborContext<'a> {
    pub model: &'a Model,
    pub attributions: &'a AttributionMatrix,
    /// Used to attribute a query series that is not a pool member.
    pub params: &'a AttributionParams,
}

/// Representation of every pool member in `space`.
pub fn space_rows(space: Space, pool: Pool<'_>, ctx: &NeighborContext<'_>) -> Result<Vec<Vec<f32>>> {
    match space {
        Space::Euclidean => Ok(pool.series.to_vec()),
        Space::Activations => pool.series.iter().map(|s| activation_vector(ctx.model, s)).collect(),
        Space::Attributions(method) => {
            let column = ctx
                .attributions
                .get(method)
                .ok_or_else(|| Error::UnknownMethod(method.to_string()))?;
            pool.indices
                .iter()
                .map(|&i| {
                    column
                        .row_of(i)
                        .map(|r| column.values[r].clone())
                        .ok_or_else(|| Error::MissingAttributions(format!("{method} has no row for sample {i}")))
                })
                .collect()
        }
    }
}

fn represent(space: Space, series: &[f32], ctx: &NeighborContext<'_>) -> Result<Vec<f32>> {
    match space {
        Space::Euclidean => Ok(series.to_vec()),
        Space::Activations => activation_vector(ctx.model, series),
        Space::Attributions(method) => {
            if ctx.attributions.get(method).is_none() {
                return Err(Error::UnknownMethod(method.to_string()));
            }
            Ok(attribute(ctx.model, series, method, ctx.params, u64::MAX)?.values)
        }
    }
}

/// The `k` closest rows to `query`, ascending by distance then index.
pub fn knn(indices: &[usize], rows: &[Vec<f32>], query: &[f32], exclude: Option<usize>, k: usize) -> Result<Vec<(usize, f64)>> {
    if k == 0 {
        return Err(Error::InvalidParams("k must be at least 1".into()));
    }
    let mut scored = Vec::with_capacity(rows.len());
    for (&index, row) in indices.iter().zip(rows) {
        if Some(index) == exclude {
            continue;
        }
        if row.len() != query.len() {
            return Err(Error::DimensionMismatch {
                expected: row.len(),
                found: query.len(),
            });
        }
        let d = row
            .iter()
            .zip(query)
            .map(|(&a, &b)| (f64::from(a) - f64::from(b)).powi(2))
            .sum::<f64>()
            .sqrt();
        scored.push((index, d));
    }
    scored.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap_or(Ordering::Equal).then(a.0.cmp(&b.0)));
    scored.truncate(k);
    Ok(scored)
}

pub fn nearest_neighbors(pool: Pool<'_>, query: Query<'_>, space: Space, k: usize, ctx: &NeighborContext<'_>) -> Result<Vec<(usize, f64)>> {
    let rows = space_rows(space, pool, ctx)?;
    match query {
        Query::Index(index) => {
            let pos = pool
                .indices
                .iter()
                .position(|&i| i == index)
                .ok_or(Error::IndexOutOfRange {
                    index,
                    len: pool.indices.len(),
                })?;
            knn(pool.indices, &rows, &rows[pos], Some(index), k)
        }
        Query::Series(series) => knn(pool.indices, &rows, &represent(space, series, ctx)?, None, k),
    }
}
