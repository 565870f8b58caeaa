//! The automatic phase: load, predict, attribute, evaluate, transform,
//! project and score, persisting one artifact per stage.

use std::fmt;
use std::fs;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tsexplain_core::attributions::{build_attribution_matrix, AttributionMatrix, AttributionParams, Method};
use tsexplain_core::data::{Split, TimeSeriesDataset};
use tsexplain_core::eval::{evaluate_method, EvalSet, RankingTable};
use tsexplain_core::nn::{activation_vector, softmax, train, Model};
use tsexplain_core::projections::{cluster_score, fit, set_visibility, ProjectionCell, ProjectionParams, Technique};
use tsexplain_core::seed;
use tsexplain_core::transforms::{apply, TransformKind};

use crate::config::{Architecture, DatasetSource, ModelSource, SessionConfig};
use crate::error::{Result, ServerError};
use crate::store::{Artifact, SessionManifest, SessionStore, Stage, Status};

/// Samples the session explains: the test split plus a seeded subsample of
/// the training split, ascending.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkingSet {
    pub indices: Vec<usize>,
    /// Samples the perturbation evaluation runs on: the test split, or the
    /// whole working set when there is none.
    pub eval: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Predictions {
    /// One entry per dataset sample.
    pub preds: Vec<usize>,
    pub probabilities: Vec<Vec<f32>>,
    pub train_accuracy: Option<f64>,
    pub test_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformColumn {
    pub kind: TransformKind,
    /// Rows follow the working set.
    pub values: Vec<Vec<f32>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformSet {
    pub indices: Vec<usize>,
    pub columns: Vec<TransformColumn>,
}

impl TransformSet {
    pub fn get(&self, kind: TransformKind) -> Option<&TransformColumn> {
        self.columns.iter().find(|c| c.kind == kind)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionGrid {
    /// Dataset index of each coordinate row.
    pub indices: Vec<usize>,
    pub cells: Vec<ProjectionCell>,
}

/// A representation of the working set that gets projected.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Source {
    Raw,
    Transform(TransformKind),
    Activations,
    Attributions(Method),
}

impl Source {
    /// Grid column order: raw, transforms, activations, attributions.
    pub fn all(config: &SessionConfig) -> Vec<Source> {
        std::iter::once(Source::Raw)
            .chain(config.transforms.iter().map(|&k| Source::Transform(k)))
            .chain(std::iter::once(Source::Activations))
            .chain(config.methods.iter().map(|&m| Source::Attributions(m)))
            .collect()
    }
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Source::Raw => f.write_str("raw"),
            Source::Transform(k) => f.write_str(k.name()),
            Source::Activations => f.write_str("activations"),
            Source::Attributions(m) => write!(f, "attr:{m}"),
        }
    }
}

impl FromStr for Source {
    type Err = ServerError;

    fn from_str(s: &str) -> Result<Self> {
        if s == "raw" {
            return Ok(Source::Raw);
        }
        if s == "activations" {
            return Ok(Source::Activations);
        }
        if let Some(m) = s.strip_prefix("attr:") {
            return Ok(Source::Attributions(m.parse()?));
        }
        TransformKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .map(Source::Transform)
            .ok_or_else(|| ServerError::InvalidRequest(format!("unknown projection source {s:?}")))
    }
}

fn read_text(path: &std::path::Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| ServerError::io(path, e))
}

pub fn load_dataset(source: &DatasetSource) -> Result<TimeSeriesDataset> {
    let train = read_text(&source.train)?;
    let dataset = match &source.test {
        Some(test) => TimeSeriesDataset::parse_ucr_splits(&train, &read_text(test)?, source.delimiter)?,
        None => TimeSeriesDataset::parse_ucr(&train, source.delimiter)?,
    };
    Ok(if source.z_normalize {
        dataset.z_normalized()
    } else {
        dataset
    })
}

/// Loads or trains the model and checks it fits the dataset.
pub fn load_model(source: &ModelSource, dataset: &TimeSeriesDataset) -> Result<Model> {
    let model = match source {
        ModelSource::Path(path) => Model::load(path)?,
        ModelSource::Train(req) => {
            let (length, classes) = (dataset.series_length(), dataset.class_count());
            let init = match req.architecture {
                Architecture::A => Model::architecture_a(length, classes, req.config.seed)?,
                Architecture::B => Model::architecture_b(length, classes, req.config.seed)?,
            };
            let idx = dataset.indices(Split::Train);
            let xs: Vec<Vec<f32>> = idx.iter().map(|&i| dataset.sample(i).to_vec()).collect();
            let ys: Vec<usize> = idx.iter().map(|&i| dataset.labels()[i]).collect();
            let (model, history) = train(&init, &xs, &ys, &req.config)?;
            if let Some(last) = history.epochs.last() {
                tracing::info!(loss = last.loss, accuracy = last.accuracy, "training finished");
            }
            model
        }
    };
    if model.input_length() != dataset.series_length() || model.classes() != dataset.class_count() {
        return Err(tsexplain_core::Error::ShapeMismatch(format!(
            "model expects length {} with {} classes, dataset has length {} with {} classes",
            model.input_length(),
            model.classes(),
            dataset.series_length(),
            dataset.class_count()
        ))
        .into());
    }
    Ok(model)
}

pub fn working_set(dataset: &TimeSeriesDataset, train_cap: usize, seed: u64) -> WorkingSet {
    let test = dataset.indices(Split::Test);
    let mut train = dataset.indices(Split::Train);
    if train.len() > train_cap {
        train.sort_by_key(|&i| (seed::derive(seed, i as u64), i));
        train.truncate(train_cap);
    }
    let mut indices: Vec<usize> = test.iter().chain(&train).copied().collect();
    indices.sort_unstable();
    let eval = if test.is_empty() { indices.clone() } else { test };
    WorkingSet { indices, eval }
}

pub fn predict(model: &Model, dataset: &TimeSeriesDataset) -> Result<Predictions> {
    let probabilities = dataset
        .samples()
        .par_iter()
        .map(|x| model.logits(x).map(|l| softmax(&l)))
        .collect::<tsexplain_core::Result<Vec<_>>>()?;
    let preds: Vec<usize> = probabilities.iter().map(|p| tsexplain_core::nn::argmax(p)).collect();
    let accuracy = |split| {
        let idx = dataset.indices(split);
        (!idx.is_empty()).then(|| idx.iter().filter(|&&i| preds[i] == dataset.labels()[i]).count() as f64 / idx.len() as f64)
    };
    Ok(Predictions {
        train_accuracy: accuracy(Split::Train),
        test_accuracy: accuracy(Split::Test),
        preds,
        probabilities,
    })
}

/// Attribution parameters as used by the session, including derived context.
pub fn attribution_params(config: &SessionConfig, dataset: &TimeSeriesDataset) -> AttributionParams {
    AttributionParams {
        seed: config.seed,
        global_mean: Some(dataset.stats().mean),
        ..config.attribution.clone()
    }
}

pub fn projection_params(config: &SessionConfig) -> ProjectionParams {
    ProjectionParams {
        seed: config.seed,
        ..config.projection.clone()
    }
}

pub fn evaluate(
    config: &SessionConfig,
    model: &Model,
    dataset: &TimeSeriesDataset,
    working: &WorkingSet,
    matrix: &AttributionMatrix,
) -> Result<RankingTable> {
    let grid = config.perturbation_grid();
    let series: Vec<Vec<f32>> = working.eval.iter().map(|&i| dataset.sample(i).to_vec()).collect();
    let labels: Vec<usize> = working.eval.iter().map(|&i| dataset.labels()[i]).collect();
    let set = EvalSet {
        indices: &working.eval,
        series: &series,
        labels: &labels,
    };
    let stats = dataset.stats();
    let mut results = Vec::with_capacity(config.methods.len() * grid.len());
    for &method in &config.methods {
        let column = matrix
            .get(method)
            .ok_or_else(|| tsexplain_core::Error::MissingAttributions(method.to_string()))?;
        for c in &grid {
            results.push(evaluate_method(model, set, method, column, c, &stats)?);
        }
    }
    Ok(RankingTable::from_results(&grid, &results)?)
}

pub fn transform_set(config: &SessionConfig, dataset: &TimeSeriesDataset, working: &WorkingSet) -> Result<TransformSet> {
    let columns = config
        .transforms
        .iter()
        .map(|&kind| {
            let values = working
                .indices
                .iter()
                .map(|&i| apply(kind, dataset.sample(i), config.sax).map(|t| t.values))
                .collect::<tsexplain_core::Result<Vec<_>>>()?;
            Ok(TransformColumn { kind, values })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TransformSet {
        indices: working.indices.clone(),
        columns,
    })
}

/// Everything a projection source can be computed from.
pub struct SourceContext<'a> {
    pub model: &'a Model,
    pub dataset: &'a TimeSeriesDataset,
    pub working: &'a WorkingSet,
    pub matrix: &'a AttributionMatrix,
    pub transforms: &'a TransformSet,
}

/// Rows of `source` for the working set, in working-set order.
pub fn source_rows(source: Source, ctx: &SourceContext<'_>) -> Result<Vec<Vec<f32>>> {
    let idx = &ctx.working.indices;
    match source {
        Source::Raw => Ok(idx.iter().map(|&i| ctx.dataset.sample(i).to_vec()).collect()),
        Source::Transform(kind) => ctx
            .transforms
            .get(kind)
            .map(|c| c.values.clone())
            .ok_or_else(|| ServerError::InvalidRequest(format!("transform {} was not computed", kind.name()))),
        Source::Activations => Ok(idx
            .par_iter()
            .map(|&i| activation_vector(ctx.model, ctx.dataset.sample(i)))
            .collect::<tsexplain_core::Result<Vec<_>>>()?),
        Source::Attributions(method) => {
            let column = ctx
                .matrix
                .get(method)
                .ok_or_else(|| tsexplain_core::Error::UnknownMethod(method.to_string()))?;
            idx.iter()
                .map(|&i| {
                    column.row_of(i).map(|r| column.values[r].clone()).ok_or_else(|| {
                        tsexplain_core::Error::MissingAttributions(format!("{method} has no row for sample {i}")).into()
                    })
                })
                .collect()
        }
    }
}

/// Fits every source x technique cell; cells are independent and fitted in
/// parallel, then collected in grid order.
pub fn projection_grid(config: &SessionConfig, ctx: &SourceContext<'_>, preds: &[usize]) -> Result<ProjectionGrid> {
    let labels: Vec<usize> = ctx.working.indices.iter().map(|&i| ctx.dataset.labels()[i]).collect();
    let working_preds: Vec<usize> = ctx.working.indices.iter().map(|&i| preds[i]).collect();
    let params = projection_params(config);
    let sources = Source::all(config);
    let rows = sources
        .iter()
        .map(|&s| source_rows(s, ctx))
        .collect::<Result<Vec<_>>>()?;
    let jobs: Vec<(usize, Technique)> = (0..sources.len())
        .flat_map(|s| config.techniques.iter().map(move |&t| (s, t)))
        .collect();
    let cells = jobs
        .par_iter()
        .map(|&(s, technique)| {
            let e = fit(technique, &rows[s], &params)?;
            let score = cluster_score(&e.coords, &labels, &working_preds, config.weights);
            Ok(ProjectionCell {
                source: sources[s].to_string(),
                technique,
                coords: e.coords,
                fitted: e.fitted,
                degenerate: e.degenerate,
                score,
                visible: true,
            })
        })
        .collect::<tsexplain_core::Result<Vec<_>>>()?;
    Ok(ProjectionGrid {
        indices: ctx.working.indices.clone(),
        cells,
    })
}

struct Runner<'a> {
    store: &'a SessionStore,
    id: &'a str,
}

impl Runner<'_> {
    fn stage<T>(&self, stage: Stage, f: impl FnOnce() -> Result<T>) -> Result<T> {
        self.store.set_status(self.id, Status::Running { stage })?;
        tracing::info!(session = self.id, %stage, "stage started");
        f().inspect_err(|e| {
            tracing::warn!(session = self.id, %stage, "stage failed: {e}");
            let failed = Status::Failed {
                stage,
                code: e.code().to_string(),
                reason: e.to_string(),
            };
            if let Err(store_err) = self.store.set_status(self.id, failed) {
                tracing::error!(session = self.id, "could not record failure: {store_err}");
            }
        })
    }
}

/// Runs a pending session to completion. Stage failures are recorded in
/// the returned manifest's status; `Err` means the session could not be
/// started or its status could not be written.
pub fn run_automatic_phase(store: &SessionStore, id: &str) -> Result<SessionManifest> {
    let manifest = store.load(id)?;
    if manifest.status != Status::Pending {
        return Err(ServerError::InvalidTransition {
            id: id.to_string(),
            from: Box::new(manifest.status),
            to: Box::new(Status::Running { stage: Stage::Load }),
        });
    }
    let config = manifest.config;
    let runner = Runner { store, id };
    let outcome = (|| -> Result<()> {
        let (dataset, model, working) = runner.stage(Stage::Load, || {
            let dataset = load_dataset(&config.dataset)?;
            let model = load_model(&config.model, &dataset)?;
            let working = working_set(&dataset, config.train_subsample, config.seed);
            store.write_artifact(id, Artifact::Model, &model.to_manifest())?;
            store.write_artifact(id, Artifact::WorkingSet, &working)?;
            Ok((dataset, model, working))
        })?;
        let predictions = runner.stage(Stage::Predict, || {
            let p = predict(&model, &dataset)?;
            store.write_artifact(id, Artifact::Predictions, &p)?;
            Ok(p)
        })?;
        let matrix = runner.stage(Stage::Attributions, || {
            let samples: Vec<(usize, &[f32])> = working.indices.iter().map(|&i| (i, dataset.sample(i))).collect();
            let params = attribution_params(&config, &dataset);
            let report = |m: Method| tracing::info!(session = id, method = %m, "attributions computed");
            let matrix = build_attribution_matrix(&model, &samples, &config.methods, &params, Some(&report))?;
            store.write_artifact(id, Artifact::Attributions, &matrix)?;
            Ok(matrix)
        })?;
        runner.stage(Stage::Evaluation, || {
            let table = evaluate(&config, &model, &dataset, &working, &matrix)?;
            store.write_artifact(id, Artifact::Ranking, &table)
        })?;
        let transforms = runner.stage(Stage::Transforms, || {
            let t = transform_set(&config, &dataset, &working)?;
            store.write_artifact(id, Artifact::Transforms, &t)?;
            Ok(t)
        })?;
        let mut grid = runner.stage(Stage::Projections, || {
            let ctx = SourceContext {
                model: &model,
                dataset: &dataset,
                working: &working,
                matrix: &matrix,
                transforms: &transforms,
            };
            projection_grid(&config, &ctx, &predictions.preds)
        })?;
        runner.stage(Stage::Scoring, || {
            set_visibility(&mut grid.cells);
            store.write_artifact(id, Artifact::Projections, &grid)
        })?;
        Ok(())
    })();
    match outcome {
        Ok(()) => store.set_status(id, Status::Done),
        // Stage failures are already recorded; anything else is a store problem.
        Err(e) => match store.load(id) {
            Ok(m) if matches!(m.status, Status::Failed { .. }) => Ok(m),
            _ => Err(e),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tsexplain_core::data::Delimiter;

    #[test]
    fn source_names_roundtrip() {
        for s in [
            Source::Raw,
            Source::Transform(TransformKind::Sax),
            Source::Activations,
            Source::Attributions(Method::IntegratedGradients),
        ] {
            assert_eq!(s.to_string().parse::<Source>().unwrap(), s);
        }
        assert!("attr:nope".parse::<Source>().is_err());
        assert!("wavelet".parse::<Source>().is_err());
    }

    #[test]
    fn working_set_caps_training_samples() {
        let mut train = String::new();
        for i in 0..30 {
            train.push_str(&format!("{}\t{}\t1\t2\n", i % 2, i));
        }
        let test = "0\t5\t5\t5\n1\t6\t6\t6\n";
        let d = TimeSeriesDataset::parse_ucr_splits(&train, test, Delimiter::Tab).unwrap();
        let w = working_set(&d, 10, 4);
        assert_eq!(w.indices.len(), 12);
        assert_eq!(w.eval, vec![30, 31]);
        assert!(w.indices.windows(2).all(|p| p[0] < p[1]));
        assert_eq!(w, working_set(&d, 10, 4));
        assert_ne!(w, working_set(&d, 10, 5));
        let all = working_set(&d, 2000, 4);
        assert_eq!(all.indices, (0..32).collect::<Vec<_>>());
    }

    #[test]
    fn without_test_split_everything_is_evaluated() {
        let d = TimeSeriesDataset::parse_ucr("0\t1\t2\n1\t2\t3\n0\t0\t1\n", Delimiter::Tab).unwrap();
        let w = working_set(&d, 2000, 0);
        assert_eq!(w.eval, w.indices);
    }
}
