//! Labeled univariate time-series datasets in the UCR text layout.
//!
//! Each non-empty line holds a class label followed by `T` values, separated
//! by tabs or commas. Original labels are remapped to contiguous indices in
//! ascending order of their numeric value; the original tokens are kept as
//! class names for display and re-serialization.

use std::cmp::Ordering;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Delimiter {
    Tab,
    Comma,
    #[default]
    Auto,
}

impl Delimiter {
    fn as_char(self) -> char {
        match self {
            Delimiter::Tab | Delimiter::Auto => '\t',
            Delimiter::Comma => ',',
        }
    }
}

/// Scalar statistics over every value of the training split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub mean: f32,
    pub min: f32,
    pub max: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeSeriesDataset {
    samples: Vec<Vec<f32>>,
    labels: Vec<usize>,
    splits: Vec<Split>,
    class_names: Vec<String>,
    length: usize,
}

impl TimeSeriesDataset {
    pub fn new(
        samples: Vec<Vec<f32>>,
        labels: Vec<usize>,
        splits: Vec<Split>,
        class_names: Vec<String>,
    ) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::EmptyInput);
        }
        if labels.len() != samples.len() || splits.len() != samples.len() {
            return Err(Error::InvalidDataset(format!(
                "{} samples, {} labels, {} split tags",
                samples.len(),
                labels.len(),
                splits.len()
            )));
        }
        let length = samples[0].len();
        if length < 2 {
            return Err(Error::InvalidDataset(format!(
                "series length {length} is below 2"
            )));
        }
        if let Some((i, s)) = samples.iter().enumerate().find(|(_, s)| s.len() != length) {
            return Err(Error::RaggedRows {
                line: i + 1,
                expected: length,
                found: s.len(),
            });
        }
        if class_names.len() < 2 {
            return Err(Error::InvalidDataset(format!(
                "{} classes, at least 2 required",
                class_names.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_names.len()) {
            return Err(Error::InvalidDataset(format!(
                "label {bad} outside [0, {})",
                class_names.len()
            )));
        }
        Ok(Self {
            samples,
            labels,
            splits,
            class_names,
            length,
        })
    }

    /// Parses a single UCR file; every sample is tagged as training data.
    pub fn parse_ucr(text: &str, delimiter: Delimiter) -> Result<Self> {
        let rows = parse_rows(text, delimiter)?;
        let length = rows[0].1.len();
        assemble(vec![(rows, Split::Train)], length)
    }

    /// Parses a train file and a test file with one shared label mapping.
    pub fn parse_ucr_splits(train: &str, test: &str, delimiter: Delimiter) -> Result<Self> {
        let train_rows = parse_rows(train, delimiter)?;
        let test_rows = parse_rows(test, delimiter)?;
        let length = train_rows[0].1.len();
        if let Some(found) = test_rows.first().map(|r| r.1.len()).filter(|&n| n != length) {
            return Err(Error::RaggedRows {
                line: 1,
                expected: length,
                found,
            });
        }
        assemble(
            vec![(train_rows, Split::Train), (test_rows, Split::Test)],
            length,
        )
    }

    /// Writes the samples of `split` (or all samples) back in UCR layout.
    pub fn to_ucr(&self, split: Option<Split>, delimiter: Delimiter) -> String {
        let sep = delimiter.as_char();
        let mut out = String::new();
        for i in 0..self.len() {
            if split.is_some_and(|s| s != self.splits[i]) {
                continue;
            }
            out.push_str(&self.class_names[self.labels[i]]);
            for v in &self.samples[i] {
                out.push(sep);
                let _ = write!(out, "{v}");
            }
            out.push('\n');
        }
        out
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn series_length(&self) -> usize {
        self.length
    }

    pub fn class_count(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn samples(&self) -> &[Vec<f32>] {
        &self.samples
    }

    pub fn sample(&self, index: usize) -> &[f32] {
        &self.samples[index]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn splits(&self) -> &[Split] {
        &self.splits
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[i] == split).collect()
    }

    /// Global scalar mean/min/max over the training split (all samples when
    /// there is no training split).
    pub fn stats(&self) -> DatasetStats {
        let mut train = self.indices(Split::Train);
        if train.is_empty() {
            train = (0..self.len()).collect();
        }
        let mut sum = 0.0f64;
        let mut count = 0usize;
        let mut min = f32::INFINITY;
        let mut max = f32::NEG_INFINITY;
        for &i in &train {
            for &v in &self.samples[i] {
                sum += f64::from(v);
                count += 1;
                min = min.min(v);
                max = max.max(v);
            }
        }
        DatasetStats {
            mean: (sum / count as f64) as f32,
            min,
            max,
        }
    }

    /// Per-position mean of the training samples of each class. Classes
    /// without training samples get `None`.
    pub fn class_means(&self) -> Vec<Option<Vec<f32>>> {
        let mut sums = vec![vec![0.0f64; self.length]; self.class_count()];
        let mut counts = vec![0usize; self.class_count()];
        for i in self.indices(Split::Train) {
            let c = self.labels[i];
            counts[c] += 1;
            for (acc, &v) in sums[c].iter_mut().zip(&self.samples[i]) {
                *acc += f64::from(v);
            }
        }
        sums.into_iter()
            .zip(counts)
            .map(|(s, n)| (n > 0).then(|| s.iter().map(|v| (v / n as f64) as f32).collect()))
            .collect()
    }

    /// Copy of the dataset with every series z-normalized.
    pub fn z_normalized(&self) -> Self {
        Self {
            samples: self.samples.iter().map(|s| z_normalize(s)).collect(),
            ..self.clone()
        }
    }
}

type Row = (String, Vec<f32>);

fn parse_rows(text: &str, delimiter: Delimiter) -> Result<Vec<Row>> {
    let lines: Vec<(usize, &str)> = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
        .collect();
    if lines.is_empty() {
        return Err(Error::EmptyInput);
    }
    let sep = match delimiter {
        Delimiter::Auto => {
            if lines.iter().any(|(_, l)| l.contains('\t')) {
                '\t'
            } else {
                ','
            }
        }
        d => d.as_char(),
    };

    let mut rows = Vec::with_capacity(lines.len());
    let mut expected = None;
    for (line_no, line) in lines {
        let mut tokens = line.split(sep).map(str::trim).filter(|t| !t.is_empty());
        let label = tokens.next().ok_or(Error::EmptyInput)?;
        if label.parse::<f64>().is_err() {
            return Err(Error::NonNumeric {
                line: line_no,
                token: label.to_string(),
            });
        }
        let values = tokens
            .map(|t| {
                t.parse::<f32>().map_err(|_| Error::NonNumeric {
                    line: line_no,
                    token: t.to_string(),
                })
            })
            .collect::<Result<Vec<f32>>>()?;
        let n = *expected.get_or_insert(values.len());
        if values.len() != n {
            return Err(Error::RaggedRows {
                line: line_no,
                expected: n,
                found: values.len(),
            });
        }
        rows.push((label.to_string(), values));
    }
    Ok(rows)
}

fn assemble(parts: Vec<(Vec<Row>, Split)>, length: usize) -> Result<TimeSeriesDataset> {
    // Distinct labels by numeric value, ascending; first spelling wins.
    let mut names: Vec<(f64, String)> = Vec::new();
    for (rows, _) in &parts {
        for (label, _) in rows {
            let value: f64 = label.parse().expect("validated while parsing");
            if !names.iter().any(|(v, _)| *v == value) {
                names.push((value, label.clone()));
            }
        }
    }
    names.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(Ordering::Equal));

    let mut samples = Vec::new();
    let mut labels = Vec::new();
    let mut splits = Vec::new();
    for (rows, split) in parts {
        for (label, values) in rows {
            let value: f64 = label.parse().expect("validated while parsing");
            let idx = names.iter().position(|(v, _)| *v == value).expect("collected above");
            debug_assert_eq!(values.len(), length);
            samples.push(values);
            labels.push(idx);
            splits.push(split);
        }
    }
    TimeSeriesDataset::new(
        samples,
        labels,
        splits,
        names.into_iter().map(|(_, n)| n).collect(),
    )
}

/// Zero mean, unit population standard deviation. Series with standard
/// deviation below 1e-12 map to all zeros.
pub fn z_normalize(series: &[f32]) -> Vec<f32> {
    let n = series.len() as f64;
    if series.is_empty() {
        return Vec::new();
    }
    let mean = series.iter().map(|&v| f64::from(v)).sum::<f64>() / n;
    let var = series
        .iter()
        .map(|&v| (f64::from(v) - mean).powi(2))
        .sum::<f64>()
        / n;
    let std = var.sqrt();
    if std < 1e-12 {
        return vec![0.0; series.len()];
    }
    series
        .iter()
        .map(|&v| ((f64::from(v) - mean) / std) as f32)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ConfusionCategory {
    #[serde(rename = "TP")]
    TruePositive,
    #[serde(rename = "TN")]
    TrueNegative,
    #[serde(rename = "FP")]
    FalsePositive,
    #[serde(rename = "FN")]
    FalseNegative,
}

impl ConfusionCategory {
    /// Display color used by the projection view.
    pub fn color(self) -> &'static str {
        match self {
            ConfusionCategory::TruePositive => "#4e79a7",
            ConfusionCategory::TrueNegative => "#76b7b2",
            ConfusionCategory::FalsePositive => "#f28e2c",
            ConfusionCategory::FalseNegative => "#e15759",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCell {
    pub true_class: usize,
    pub pred_class: usize,
    /// Only set for binary problems; class 1 is the positive class.
    pub category: Option<ConfusionCategory>,
    pub color_index: usize,
}

pub fn confusion_assign(true_class: usize, pred_class: usize, class_count: usize) -> ConfusionCell {
    let category = (class_count == 2).then_some(match (true_class, pred_class) {
        (1, 1) => ConfusionCategory::TruePositive,
        (0, 0) => ConfusionCategory::TrueNegative,
        (0, _) => ConfusionCategory::FalsePositive,
        _ => ConfusionCategory::FalseNegative,
    });
    ConfusionCell {
        true_class,
        pred_class,
        category,
        color_index: true_class * class_count + pred_class,
    }
}
