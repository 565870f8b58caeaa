//! Perturbation analysis: replace the most relevant inputs, measure the
//! accuracy drop, and rank attribution methods against a random baseline.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attributions::{random, Method, MethodColumn};
use crate::data::DatasetStats;
use crate::error::{Error, Result};
use crate::nn::Model;
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Point,
    Time,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Zero,
    /// Arithmetic negation.
    Inverse,
    Mean,
    Min,
    Max,
    /// Reverse each window in place. Time regime only.
    Swap,
}

impl Strategy {
    fn name(self) -> &'static str {
        match self {
            Strategy::Zero => "zero",
            Strategy::Inverse => "inverse",
            Strategy::Mean => "mean",
            Strategy::Min => "min",
            Strategy::Max => "max",
            Strategy::Swap => "swap",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Threshold {
    TopPercent(f64),
    AbsValue(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationConfig {
    pub regime: Regime,
    pub strategy: Strategy,
    pub threshold: Threshold,
    /// Window length in the time regime.
    pub span: usize,
    pub compare_random: bool,
    pub seed: u64,
}

impl PerturbationConfig {
    pub fn validate(&self) -> Result<()> {
        match self.threshold {
            Threshold::TopPercent(p) if !(p > 0.0 && p <= 100.0) => {
                return Err(Error::InvalidConfig(format!("top percent {p} outside (0, 100]")))
            }
            Threshold::AbsValue(v) if !v.is_finite() => {
                return Err(Error::InvalidConfig(format!("absolute threshold {v} is not finite")))
            }
            _ => {}
        }
        if self.span == 0 {
            return Err(Error::InvalidConfig("span must be at least 1".into()));
        }
        if self.strategy == Strategy::Swap && self.regime == Regime::Point {
            return Err(Error::InvalidConfig("swap is only defined in the time regime".into()));
        }
        Ok(())
    }

    /// Short column label, e.g. `time/swap/top10/L5`.
    pub fn label(&self) -> String {
        let threshold = match self.threshold {
            Threshold::TopPercent(p) => format!("top{p}"),
            Threshold::AbsValue(v) => format!("abs{v}"),
        };
        match self.regime {
            Regime::Point => format!("point/{}/{threshold}", self.strategy.name()),
            Regime::Time => format!("time/{}/{threshold}/L{}", self.strategy.name(), self.span),
        }
    }
}

impl fmt::Display for PerturbationConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

/// The grid run by the automatic phase: both regimes crossed with zero,
/// inverse and mean, plus swap in the time regime; top 10 %, span 5.
pub fn default_grid(seed: u64) -> Vec<PerturbationConfig> {
    let mut grid = Vec::new();
    for regime in [Regime::Point, Regime::Time] {
        for strategy in [Strategy::Zero, Strategy::Inverse, Strategy::Mean, Strategy::Swap] {
            if strategy == Strategy::Swap && regime == Regime::Point {
                continue;
            }
            grid.push(PerturbationConfig {
                regime,
                strategy,
                threshold: Threshold::TopPercent(10.0),
                span: 5,
                compare_random: true,
                seed,
            });
        }
    }
    grid
}

/// Indices of relevant points by `|value|`, ascending.
pub fn select_relevant(values: &[f32], threshold: Threshold) -> Vec<usize> {
    match threshold {
        Threshold::TopPercent(p) => top_k(values, (p * values.len() as f64 / 100.0).ceil() as usize),
        Threshold::AbsValue(v) => (0..values.len()).filter(|&i| f64::from(values[i].abs()) >= v).collect(),
    }
}

/// Indices of the `k` largest `|value|`, ties to the lower index, ascending.
pub fn top_k(values: &[f32], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| {
        values[b]
            .abs()
            .partial_cmp(&values[a].abs())
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    order.truncate(k);
    order.sort_unstable();
    order
}

/// Window of `span` points centred on `t`, truncated to `[0, len)`.
fn window(t: usize, span: usize, len: usize) -> (usize, usize) {
    let start = t.saturating_sub((span - 1) / 2);
    let end = (t + span / 2 + 1).min(len);
    (start, end)
}

/// Half-open ranges actually modified by `perturb`, merged where they overlap.
pub fn perturbed_ranges(indices: &[usize], config: &PerturbationConfig, len: usize) -> Vec<(usize, usize)> {
    let mut ranges: Vec<(usize, usize)> = match config.regime {
        Regime::Point => indices.iter().map(|&t| (t, t + 1)).collect(),
        Regime::Time => indices.iter().map(|&t| window(t, config.span, len)).collect(),
    };
    ranges.sort_unstable();
    let mut merged: Vec<(usize, usize)> = Vec::with_capacity(ranges.len());
    for (start, end) in ranges {
        match merged.last_mut() {
            Some(last) if start < last.1 => last.1 = last.1.max(end),
            _ => merged.push((start, end)),
        }
    }
    merged
}

pub fn perturb(
    series: &[f32],
    indices: &[usize],
    config: &PerturbationConfig,
    stats: &DatasetStats,
) -> Result<Vec<f32>> {
    if let Some(&bad) = indices.iter().find(|&&i| i >= series.len()) {
        return Err(Error::IndexOutOfRange {
            index: bad,
            len: series.len(),
        });
    }
    let mut out = series.to_vec();
    for (start, end) in perturbed_ranges(indices, config, series.len()) {
        let slot = &mut out[start..end];
        match config.strategy {
            Strategy::Zero => slot.fill(0.0),
            Strategy::Mean => slot.fill(stats.mean),
            Strategy::Min => slot.fill(stats.min),
            Strategy::Max => slot.fill(stats.max),
            Strategy::Inverse => slot.iter_mut().for_each(|v| *v = -*v),
            Strategy::Swap => slot.reverse(),
        }
    }
    Ok(out)
}

/// Samples to evaluate on: series plus ground-truth labels, keyed by dataset index.
#[derive(Debug, Clone, Copy)]
pub struct EvalSet<'a> {
    pub indices: &'a [usize],
    pub series: &'a [Vec<f32>],
    pub labels: &'a [usize],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub method: Method,
    pub config: PerturbationConfig,
    pub acc_before: f64,
    pub acc_after: f64,
    pub drop: f64,
    pub random_drop: Option<f64>,
    pub beats_random: bool,
}

fn accuracy(preds: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    preds.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / labels.len() as f64
}

/// Accuracy of `model` on `set` after perturbing each sample at the indices
/// chosen by `select(position, dataset_index)`.
fn perturbed_accuracy<F>(model: &Model, set: EvalSet<'_>, config: &PerturbationConfig, stats: &DatasetStats, select: F) -> Result<f64>
where
    F: Fn(usize, usize) -> Vec<usize> + Sync,
{
    let preds = (0..set.indices.len())
        .into_par_iter()
        .map(|pos| {
            let picked = select(pos, set.indices[pos]);
            let perturbed = perturb(&set.series[pos], &picked, config, stats)?;
            model.predict(&perturbed)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(accuracy(&preds, set.labels))
}

pub fn evaluate_method(
    model: &Model,
    set: EvalSet<'_>,
    method: Method,
    column: &MethodColumn,
    config: &PerturbationConfig,
    stats: &DatasetStats,
) -> Result<EvalResult> {
    config.validate()?;
    if set.series.len() != set.indices.len() || set.labels.len() != set.indices.len() {
        return Err(Error::ShapeMismatch("evaluation set columns differ in length".into()));
    }
    let rows = set
        .indices
        .iter()
        .map(|&i| {
            column
                .row_of(i)
                .ok_or_else(|| Error::MissingAttributions(format!("{method} has no attribution for sample {i}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let before = model.predict_all(set.series)?;
    let acc_before = accuracy(&before, set.labels);
    let selections: Vec<Vec<usize>> = rows
        .iter()
        .map(|&row| select_relevant(&column.values[row], config.threshold))
        .collect();
    let acc_after = perturbed_accuracy(model, set, config, stats, |pos, _| selections[pos].clone())?;
    let drop = acc_before - acc_after;
    let random_drop = if config.compare_random {
        let length = model.input_length();
        let acc = perturbed_accuracy(model, set, config, stats, |pos, index| {
            let noise = random(length, seed::derive(config.seed, index as u64)).values;
            top_k(&noise, selections[pos].len())
        })?;
        Some(acc_before - acc)
    } else {
        None
    };
    Ok(EvalResult {
        method,
        config: config.clone(),
        acc_before,
        acc_after,
        drop,
        random_drop,
        beats_random: drop > random_drop.unwrap_or(0.0),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankEntry {
    pub method: Method,
    pub mean_drop: f64,
    /// Baseline the entry was compared against.
    pub random_drop: Option<f64>,
    pub beats_random: bool,
}

/// Orders methods by mean drop over all configs, best first; ties by name.
///
/// Results of the `random` method are the baseline and are not ranked. Without
/// them the per-config `random_drop` values of each method are averaged
/// instead; with no baseline at all a method must show a positive drop.
pub fn rank_methods(results: &[EvalResult]) -> Vec<RankEntry> {
    let mean = |values: &[f64]| (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64);
    let mut by_method: BTreeMap<&str, (Method, Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for r in results {
        let entry = by_method.entry(r.method.name()).or_insert((r.method, Vec::new(), Vec::new()));
        entry.1.push(r.drop);
        if let Some(rd) = r.random_drop {
            entry.2.push(rd);
        }
    }
    let random_baseline = by_method.get(Method::Random.name()).and_then(|(_, drops, _)| mean(drops));
    let mut entries: Vec<RankEntry> = by_method
        .values()
        .filter(|(m, _, _)| *m != Method::Random)
        .map(|(method, drops, random_drops)| {
            let mean_drop = mean(drops).unwrap_or(0.0);
            let baseline = random_baseline.or_else(|| mean(random_drops));
            RankEntry {
                method: *method,
                mean_drop,
                random_drop: baseline,
                beats_random: mean_drop > baseline.unwrap_or(0.0),
            }
        })
        .collect();
    entries.sort_by(|a, b| {
        b.mean_drop
            .partial_cmp(&a.mean_drop)
            .unwrap_or(Ordering::Equal)
            .then_with(|| a.method.name().cmp(b.method.name()))
    });
    entries
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableCell {
    pub acc_before: f64,
    pub acc_after: f64,
    pub drop: f64,
    pub random_drop: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub method: Method,
    pub cells: Vec<TableCell>,
}

/// Evaluation grid as persisted: one row per method, one column per config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingTable {
    pub columns: Vec<PerturbationConfig>,
    pub labels: Vec<String>,
    pub rows: Vec<TableRow>,
}

impl RankingTable {
    /// Rows follow the first appearance of each method; every method must
    /// have a result for every config.
    pub fn from_results(columns: &[PerturbationConfig], results: &[EvalResult]) -> Result<Self> {
        let mut rows: Vec<TableRow> = Vec::new();
        for r in results {
            let col = columns
                .iter()
                .position(|c| c == &r.config)
                .ok_or_else(|| Error::InvalidConfig(format!("result for unknown config {}", r.config)))?;
            let row = match rows.iter().position(|row| row.method == r.method) {
                Some(i) => i,
                None => {
                    rows.push(TableRow {
                        method: r.method,
                        cells: Vec::new(),
                    });
                    rows.len() - 1
                }
            };
            if rows[row].cells.len() != col {
                return Err(Error::InvalidConfig(format!("results for {} are not in column order", r.method)));
            }
            rows[row].cells.push(TableCell {
                acc_before: r.acc_before,
                acc_after: r.acc_after,
                drop: r.drop,
                random_drop: r.random_drop,
            });
        }
        if let Some(row) = rows.iter().find(|row| row.cells.len() != columns.len()) {
            return Err(Error::MissingAttributions(format!("{} lacks results for some configs", row.method)));
        }
        Ok(Self {
            columns: columns.to_vec(),
            labels: columns.iter().map(PerturbationConfig::label).collect(),
            rows,
        })
    }

    pub fn results(&self) -> Vec<EvalResult> {
        self.rows
            .iter()
            .flat_map(|row| {
                row.cells.iter().zip(&self.columns).map(move |(cell, config)| EvalResult {
                    method: row.method,
                    config: config.clone(),
                    acc_before: cell.acc_before,
                    acc_after: cell.acc_after,
                    drop: cell.drop,
                    random_drop: cell.random_drop,
                    beats_random: cell.drop > cell.random_drop.unwrap_or(0.0),
                })
            })
            .collect()
    }

    pub fn ranking(&self) -> Vec<RankEntry> {
        rank_methods(&self.results())
    }

    /// Plain-text rendering, best method first.
    pub fn render(&self) -> String {
        let ranking = self.ranking();
        let width = self.rows.iter().map(|r| r.method.name().len()).max().unwrap_or(6).max(6);
        let mut out = format!("{:<width$}", "method");
        for label in &self.labels {
            out.push_str(&format!("  {label:>16}"));
        }
        out.push_str("      mean  beats_random\n");
        let ordered = ranking
            .iter()
            .map(|e| e.method)
            .chain(self.rows.iter().map(|r| r.method).filter(|m| *m == Method::Random));
        for method in ordered {
            let Some(row) = self.rows.iter().find(|r| r.method == method) else {
                continue;
            };
            out.push_str(&format!("{:<width$}", method.name()));
            for cell in &row.cells {
                out.push_str(&format!("  {:>16.4}", cell.drop));
            }
            let mean = row.cells.iter().map(|c| c.drop).sum::<f64>() / row.cells.len().max(1) as f64;
            let beats = ranking
                .iter()
                .find(|e| e.method == method)
                .map_or("-", |e| if e.beats_random { "yes" } else { "no" });
            out.push_str(&format!("  {mean:>8.4}  {beats}\n"));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, prop_assert_eq, prop_oneof, proptest, Just};

    fn stats() -> DatasetStats {
        DatasetStats {
            mean: 0.5,
            min: -3.0,
            max: 4.0,
        }
    }

    fn config(regime: Regime, strategy: Strategy, span: usize) -> PerturbationConfig {
        PerturbationConfig {
            regime,
            strategy,
            threshold: Threshold::TopPercent(10.0),
            span,
            compare_random: false,
            seed: 0,
        }
    }

    #[test]
    fn top_percent_selection() {
        assert_eq!(select_relevant(&[0.9, 0.1, 0.5, 0.7], Threshold::TopPercent(50.0)), vec![0, 3]);
        assert_eq!(select_relevant(&[0.9, -0.1, 0.5, 0.7], Threshold::AbsValue(2.0)), Vec::<usize>::new());
        assert_eq!(select_relevant(&[0.3; 4], Threshold::TopPercent(25.0)), vec![0]);
        assert_eq!(select_relevant(&[0.1, -0.8, 0.5], Threshold::AbsValue(0.5)), vec![1, 2]);
    }

    #[test]
    fn point_strategies() {
        let x = [1.0, 2.0, 3.0];
        let p = |s| perturb(&x, &[1], &config(Regime::Point, s, 1), &stats()).unwrap();
        assert_eq!(p(Strategy::Zero), vec![1.0, 0.0, 3.0]);
        assert_eq!(p(Strategy::Inverse), vec![1.0, -2.0, 3.0]);
        assert_eq!(p(Strategy::Mean), vec![1.0, 0.5, 3.0]);
        assert_eq!(p(Strategy::Min), vec![1.0, -3.0, 3.0]);
        assert_eq!(p(Strategy::Max), vec![1.0, 4.0, 3.0]);
    }

    #[test]
    fn time_swap_reverses_window() {
        let out = perturb(&[1.0, 2.0, 3.0, 4.0, 5.0], &[2], &config(Regime::Time, Strategy::Swap, 3), &stats()).unwrap();
        assert_eq!(out, vec![1.0, 4.0, 3.0, 2.0, 5.0]);
    }

    #[test]
    fn windows_clamp_and_merge() {
        let c = config(Regime::Time, Strategy::Zero, 5);
        assert_eq!(perturbed_ranges(&[0], &c, 10), vec![(0, 3)]);
        assert_eq!(perturbed_ranges(&[9], &c, 10), vec![(7, 10)]);
        assert_eq!(perturbed_ranges(&[2, 4], &c, 10), vec![(0, 7)]);
        assert_eq!(perturbed_ranges(&[1, 7], &c, 10), vec![(0, 4), (5, 10)]);
        let even = config(Regime::Time, Strategy::Zero, 4);
        assert_eq!(perturbed_ranges(&[5], &even, 10), vec![(4, 8)]);
    }

    #[test]
    fn out_of_range_index() {
        let err = perturb(&[1.0, 2.0], &[2], &config(Regime::Point, Strategy::Zero, 1), &stats()).unwrap_err();
        assert_eq!(err, Error::IndexOutOfRange { index: 2, len: 2 });
    }

    #[test]
    fn config_validation() {
        assert!(config(Regime::Point, Strategy::Swap, 1).validate().is_err());
        assert!(config(Regime::Time, Strategy::Zero, 0).validate().is_err());
        let mut c = config(Regime::Point, Strategy::Zero, 1);
        c.threshold = Threshold::TopPercent(0.0);
        assert!(c.validate().is_err());
        c.threshold = Threshold::TopPercent(100.0);
        assert!(c.validate().is_ok());
    }

    #[test]
    fn default_grid_shape() {
        let grid = default_grid(3);
        assert_eq!(grid.len(), 7);
        assert!(grid.iter().all(|c| c.validate().is_ok() && c.compare_random && c.span == 5));
        assert_eq!(grid.iter().filter(|c| c.strategy == Strategy::Swap).count(), 1);
    }

    fn result(method: Method, drop: f64) -> EvalResult {
        EvalResult {
            method,
            config: config(Regime::Point, Strategy::Zero, 1),
            acc_before: 0.9,
            acc_after: 0.9 - drop,
            drop,
            random_drop: None,
            beats_random: false,
        }
    }

    #[test]
    fn ranking_against_random_row() {
        let ranked = rank_methods(&[
            result(Method::Saliency, 0.10),
            result(Method::Random, 0.05),
            result(Method::Occlusion, 0.30),
        ]);
        let order: Vec<_> = ranked.iter().map(|e| e.method).collect();
        assert_eq!(order, vec![Method::Occlusion, Method::Saliency]);
        assert!(ranked.iter().all(|e| e.beats_random));

        let ranked = rank_methods(&[result(Method::Lime, 0.02), result(Method::Random, 0.05)]);
        assert_eq!(ranked.len(), 1);
        assert!(!ranked[0].beats_random);

        let ranked = rank_methods(&[result(Method::Lime, 0.02)]);
        assert_eq!(ranked[0].method, Method::Lime);
    }

    #[test]
    fn ranking_ties_break_by_name() {
        let ranked = rank_methods(&[result(Method::Saliency, 0.2), result(Method::GradInput, 0.2)]);
        assert_eq!(ranked[0].method, Method::GradInput);
    }

    #[test]
    fn table_roundtrips_results() {
        let columns = vec![config(Regime::Point, Strategy::Zero, 1), config(Regime::Time, Strategy::Swap, 3)];
        let mut results = Vec::new();
        for (m, d) in [(Method::Saliency, 0.1), (Method::Random, 0.02)] {
            for c in &columns {
                let mut r = result(m, d);
                r.config = c.clone();
                r.random_drop = Some(0.01);
                r.beats_random = d > 0.01;
                results.push(r);
            }
        }
        let table = RankingTable::from_results(&columns, &results).unwrap();
        assert_eq!(table.results(), results);
        assert_eq!(table.labels, vec!["point/zero/top10", "time/swap/top10/L3"]);
        assert!(table.render().starts_with("method"));
        assert!(RankingTable::from_results(&columns, &results[..3]).is_err());
    }

    proptest! {
        #[test]
        fn perturb_touches_only_windows(
            x in proptest::collection::vec(-5.0f32..5.0, 2..60),
            picks in proptest::collection::vec(0usize..1000, 0..8),
            span in 1usize..8,
            strategy in prop_oneof![Just(Strategy::Zero), Just(Strategy::Inverse), Just(Strategy::Mean), Just(Strategy::Swap)],
        ) {
            let mut idx: Vec<usize> = picks.iter().map(|p| p % x.len()).collect();
            idx.sort_unstable();
            idx.dedup();
            let c = config(Regime::Time, strategy, span);
            let out = perturb(&x, &idx, &c, &stats()).unwrap();
            let ranges = perturbed_ranges(&idx, &c, x.len());
            for i in 0..x.len() {
                if !ranges.iter().any(|&(s, e)| i >= s && i < e) {
                    prop_assert_eq!(out[i].to_bits(), x[i].to_bits());
                }
            }
            if strategy == Strategy::Swap {
                for &(s, e) in &ranges {
                    let mut a = x[s..e].to_vec();
                    let mut b = out[s..e].to_vec();
                    a.sort_by(f32::total_cmp);
                    b.sort_by(f32::total_cmp);
                    prop_assert_eq!(a, b);
                }
            }
        }

        #[test]
        fn top_percent_count(x in proptest::collection::vec(-5.0f32..5.0, 1..80), p in 0.5f64..100.0) {
            let picked = select_relevant(&x, Threshold::TopPercent(p));
            prop_assert_eq!(picked.len(), ((p * x.len() as f64 / 100.0).ceil() as usize).min(x.len()));
            prop_assert!(picked.windows(2).all(|w| w[0] < w[1]));
            let smallest_kept = picked.iter().map(|&i| x[i].abs()).fold(f32::INFINITY, f32::min);
            for i in (0..x.len()).filter(|i| !picked.contains(i)) {
                prop_assert!(x[i].abs() <= smallest_kept);
            }
        }

        #[test]
        fn ranking_is_sorted(drops in proptest::collection::vec(0.0f64..1.0, 1..6)) {
            let results: Vec<_> = drops.iter().zip(Method::ALL).map(|(&d, m)| result(m, d)).collect();
            let ranked = rank_methods(&results);
            prop_assert!(ranked.windows(2).all(|w| w[0].mean_drop >= w[1].mean_drop));
            prop_assert_eq!(rank_methods(&results), ranked);
        }
    }
}
