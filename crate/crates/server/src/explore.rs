//! Read-side operations on a finished session. Every answer is computed
//! from persisted artifacts plus pure engine calls.

use std::collections::hash_map::Entry;
use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use tsexplain_core::attributions::{attribute, AttributionMatrix, AttributionParams, Method};
use tsexplain_core::counterfactuals::{
    nearest_unlike_neighbor, native_guide_cf, wachter_cf, Candidates, CfMethod, Counterfactual, NativeGuideParams,
    WachterParams,
};
use tsexplain_core::data::{confusion_assign, ConfusionCell, Split, TimeSeriesDataset};
use tsexplain_core::eval::{RankEntry, RankingTable};
use tsexplain_core::nn::{activation_maximization, activation_vector, mc_dropout_predict, softmax, ActMaxParams, Model, Uncertainty};
use tsexplain_core::projections::{project_oos, ProjectionCell, Technique};
use tsexplain_core::seed;
use tsexplain_core::transforms::apply;
use tsexplain_core::whatif::{apply_edits, nearest_neighbors, EditContext, EditOp, NeighborContext, Pool, Query, Space};

use crate::error::{Result, ServerError};
use crate::pipeline::{attribution_params, load_dataset, source_rows, Predictions, ProjectionGrid, Source, SourceContext, TransformSet, WorkingSet};
use crate::store::{Artifact, SessionManifest, SessionStore};

/// Stochastic forward passes behind every uncertainty estimate.
pub const MC_PASSES: usize = 50;
/// Stream id for series that are not dataset members.
const EDITED_STREAM: u64 = u64::MAX;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleInfo {
    pub index: usize,
    pub label: usize,
    pub pred: usize,
    pub confusion: ConfusionCell,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionsView {
    pub class_names: Vec<String>,
    pub samples: Vec<SampleInfo>,
    pub cells: Vec<ProjectionCell>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingView {
    pub table: RankingTable,
    pub ranking: Vec<RankEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleDetail {
    pub index: usize,
    pub split: Split,
    pub label: usize,
    pub series: Vec<f32>,
    pub prediction: usize,
    pub probabilities: Vec<f32>,
    pub confusion: ConfusionCell,
    pub attributions: BTreeMap<Method, Vec<f32>>,
    /// Activation maximization of the predicted class, started from that
    /// class's mean training series.
    pub actmax: Vec<f32>,
    pub uncertainty: Uncertainty,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub index: usize,
    pub distance: f64,
}

/// Where a new series lands in one visible projection cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellCoord {
    pub source: String,
    pub technique: Technique,
    pub coord: [f32; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Base {
    Index(usize),
    Series(Vec<f32>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WhatIfRequest {
    pub base: Base,
    #[serde(default)]
    pub edits: Vec<EditOp>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WhatIfResult {
    pub series: Vec<f32>,
    pub prediction: usize,
    pub probabilities: Vec<f32>,
    pub uncertainty: Uncertainty,
    pub attributions: BTreeMap<Method, Vec<f32>>,
    pub coords: Vec<CellCoord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CounterfactualRequest {
    pub idx: usize,
    pub method: CfMethod,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualResult {
    pub counterfactual: Counterfactual,
    /// Attribution method that chose the transplanted window.
    pub guide_method: Option<Method>,
    pub coords: Vec<CellCoord>,
}

/// A done session with its always-needed artifacts loaded; the larger ones
/// are read on demand.
pub struct SessionView<'a> {
    store: &'a SessionStore,
    pub manifest: SessionManifest,
    pub dataset: TimeSeriesDataset,
    pub model: Model,
    pub working: WorkingSet,
    pub predictions: Predictions,
    pub params: AttributionParams,
}

impl<'a> SessionView<'a> {
    pub fn open(store: &'a SessionStore, id: &str) -> Result<Self> {
        let manifest = store.load_done(id)?;
        let dataset = load_dataset(&manifest.config.dataset)?;
        let model_doc: serde_json::Value = store.read_artifact(id, Artifact::Model)?;
        let model = Model::from_manifest(&model_doc)?;
        let working = store.read_artifact(id, Artifact::WorkingSet)?;
        let predictions: Predictions = store.read_artifact(id, Artifact::Predictions)?;
        if predictions.preds.len() != dataset.len() {
            return Err(ServerError::Artifact {
                id: id.to_string(),
                name: Artifact::Predictions.file_name().into(),
                reason: format!("{} predictions for {} samples; the dataset changed", predictions.preds.len(), dataset.len()),
            });
        }
        let params = attribution_params(&manifest.config, &dataset);
        Ok(Self {
            store,
            manifest,
            dataset,
            model,
            working,
            predictions,
            params,
        })
    }

    fn id(&self) -> &str {
        &self.manifest.id
    }

    pub fn ranking_table(&self) -> Result<RankingTable> {
        self.store.read_artifact(self.id(), Artifact::Ranking)
    }

    pub fn attributions(&self) -> Result<AttributionMatrix> {
        self.store.read_artifact(self.id(), Artifact::Attributions)
    }

    pub fn transforms(&self) -> Result<TransformSet> {
        self.store.read_artifact(self.id(), Artifact::Transforms)
    }

    pub fn grid(&self) -> Result<ProjectionGrid> {
        self.store.read_artifact(self.id(), Artifact::Projections)
    }

    fn check_index(&self, index: usize) -> Result<()> {
        if index >= self.dataset.len() {
            return Err(tsexplain_core::Error::IndexOutOfRange {
                index,
                len: self.dataset.len(),
            }
            .into());
        }
        Ok(())
    }

    fn sample_info(&self, index: usize) -> SampleInfo {
        let label = self.dataset.labels()[index];
        let pred = self.predictions.preds[index];
        SampleInfo {
            index,
            label,
            pred,
            confusion: confusion_assign(label, pred, self.dataset.class_count()),
        }
    }

    pub fn ranking(&self) -> Result<RankingView> {
        let table = self.ranking_table()?;
        Ok(RankingView {
            ranking: table.ranking(),
            table,
        })
    }

    pub fn projections(&self) -> Result<ProjectionsView> {
        let grid = self.grid()?;
        Ok(ProjectionsView {
            class_names: self.dataset.class_names().to_vec(),
            samples: grid.indices.iter().map(|&i| self.sample_info(i)).collect(),
            cells: grid.cells,
        })
    }

    /// Stored attribution rows of `index`, computed fresh for samples
    /// outside the working set.
    fn sample_attributions(&self, index: usize, matrix: &AttributionMatrix) -> Result<BTreeMap<Method, Vec<f32>>> {
        let x = self.dataset.sample(index);
        self.manifest
            .config
            .methods
            .iter()
            .map(|&m| {
                let stored = matrix.get(m).and_then(|c| c.row_of(index).map(|r| c.values[r].clone()));
                let values = match stored {
                    Some(v) => v,
                    None => attribute(&self.model, x, m, &self.params, index as u64)?.values,
                };
                Ok((m, values))
            })
            .collect()
    }

    pub fn sample(&self, index: usize) -> Result<SampleDetail> {
        self.check_index(index)?;
        let x = self.dataset.sample(index);
        let info = self.sample_info(index);
        let means = self.dataset.class_means();
        let init = means[info.pred].clone().unwrap_or_else(|| vec![0.0; x.len()]);
        Ok(SampleDetail {
            index,
            split: self.dataset.splits()[index],
            label: info.label,
            series: x.to_vec(),
            prediction: info.pred,
            probabilities: self.predictions.probabilities[index].clone(),
            confusion: info.confusion,
            attributions: self.sample_attributions(index, &self.attributions()?)?,
            actmax: activation_maximization(&self.model, info.pred, &ActMaxParams::default(), &init)?,
            uncertainty: mc_dropout_predict(&self.model, x, MC_PASSES, seed::derive(self.manifest.config.seed, index as u64))?,
        })
    }

    /// Neighbours among the working set. A working-set member is excluded
    /// from its own result; other samples are queried by value.
    pub fn neighbors(&self, index: usize, space: Space, k: usize) -> Result<Vec<Neighbor>> {
        self.check_index(index)?;
        let matrix = self.attributions()?;
        let series: Vec<Vec<f32>> = self.working.indices.iter().map(|&i| self.dataset.sample(i).to_vec()).collect();
        let pool = Pool {
            indices: &self.working.indices,
            series: &series,
        };
        let ctx = NeighborContext {
            model: &self.model,
            attributions: &matrix,
            params: &self.params,
        };
        let query = if self.working.indices.binary_search(&index).is_ok() {
            Query::Index(index)
        } else {
            Query::Series(self.dataset.sample(index))
        };
        Ok(nearest_neighbors(pool, query, space, k, &ctx)?
            .into_iter()
            .map(|(index, distance)| Neighbor { index, distance })
            .collect())
    }

    /// Out-of-sample coordinates of `series` in every visible cell.
    /// `known` holds attributions of `series` that are already computed.
    pub fn place(&self, series: &[f32], known: &BTreeMap<Method, Vec<f32>>) -> Result<Vec<CellCoord>> {
        let grid = self.grid()?;
        let matrix = self.attributions()?;
        let transforms = self.transforms()?;
        let ctx = SourceContext {
            model: &self.model,
            dataset: &self.dataset,
            working: &self.working,
            matrix: &matrix,
            transforms: &transforms,
        };
        let mut rows: HashMap<Source, (Vec<Vec<f32>>, Vec<f32>)> = HashMap::new();
        let mut out = Vec::new();
        for cell in grid.cells.iter().filter(|c| c.visible) {
            let source: Source = cell.source.parse()?;
            if let Entry::Vacant(slot) = rows.entry(source) {
                let point = match source {
                    Source::Raw => series.to_vec(),
                    Source::Transform(kind) => apply(kind, series, self.manifest.config.sax)?.values,
                    Source::Activations => activation_vector(&self.model, series)?,
                    Source::Attributions(m) => match known.get(&m) {
                        Some(v) => v.clone(),
                        None => attribute(&self.model, series, m, &self.params, EDITED_STREAM)?.values,
                    },
                };
                slot.insert((source_rows(source, &ctx)?, point));
            }
            let (train_rows, point) = &rows[&source];
            out.push(CellCoord {
                source: cell.source.clone(),
                technique: cell.technique,
                coord: project_oos(&cell.fitted, train_rows, &cell.coords, point)?,
            });
        }
        Ok(out)
    }

    pub fn whatif(&self, request: &WhatIfRequest) -> Result<WhatIfResult> {
        let (base, stream) = match &request.base {
            Base::Index(i) => {
                self.check_index(*i)?;
                (self.dataset.sample(*i).to_vec(), *i as u64)
            }
            Base::Series(s) => {
                if s.len() != self.dataset.series_length() {
                    return Err(tsexplain_core::Error::DimensionMismatch {
                        expected: self.dataset.series_length(),
                        found: s.len(),
                    }
                    .into());
                }
                (s.clone(), EDITED_STREAM)
            }
        };
        let means = self.dataset.class_means();
        let ctx = EditContext {
            model: Some(&self.model),
            global_mean: Some(self.dataset.stats().mean),
            class_means: Some(&means),
            actmax: ActMaxParams::default(),
        };
        let series = apply_edits(&base, &request.edits, &ctx)?;
        let probabilities = softmax(&self.model.logits(&series)?);
        let attributions = self
            .manifest
            .config
            .methods
            .iter()
            .map(|&m| Ok((m, attribute(&self.model, &series, m, &self.params, EDITED_STREAM)?.values)))
            .collect::<Result<BTreeMap<_, _>>>()?;
        Ok(WhatIfResult {
            prediction: tsexplain_core::nn::argmax(&probabilities),
            uncertainty: mc_dropout_predict(&self.model, &series, MC_PASSES, seed::derive(self.manifest.config.seed, stream))?,
            coords: self.place(&series, &attributions)?,
            probabilities,
            attributions,
            series,
        })
    }

    /// Best-ranked method that is not the random baseline.
    pub fn guide_method(&self) -> Result<Option<Method>> {
        Ok(self
            .ranking_table()?
            .ranking()
            .into_iter()
            .map(|e| e.method)
            .find(|&m| m != Method::Random))
    }

    pub fn counterfactual(&self, request: &CounterfactualRequest) -> Result<CounterfactualResult> {
        let index = request.idx;
        self.check_index(index)?;
        let query = self.dataset.sample(index);
        let pred = self.predictions.preds[index];
        let (mut cf, guide_method) = match request.method {
            CfMethod::Native => {
                let train = self.dataset.indices(Split::Train);
                let series: Vec<Vec<f32>> = train.iter().map(|&i| self.dataset.sample(i).to_vec()).collect();
                let preds: Vec<usize> = train.iter().map(|&i| self.predictions.preds[i]).collect();
                let candidates = Candidates {
                    indices: &train,
                    series: &series,
                    preds: &preds,
                };
                let (guide, _) = nearest_unlike_neighbor(candidates, query, pred)?;
                let method = self.guide_method()?.unwrap_or(Method::Saliency);
                let attribution = self.sample_attributions(index, &self.attributions()?)?.remove(&method);
                let attribution = match attribution {
                    Some(a) => a,
                    None => attribute(&self.model, query, method, &self.params, index as u64)?.values,
                };
                let mut cf = native_guide_cf(&self.model, query, &attribution, self.dataset.sample(guide), &NativeGuideParams::default())?;
                cf.guide_index = Some(guide);
                (cf, Some(method))
            }
            CfMethod::Wachter => {
                let probs = &self.predictions.probabilities[index];
                let target = (0..probs.len())
                    .filter(|&c| c != pred)
                    .max_by(|&a, &b| probs[a].total_cmp(&probs[b]).then(b.cmp(&a)))
                    .ok_or_else(|| ServerError::InvalidRequest("model has a single class".into()))?;
                (wachter_cf(&self.model, query, target, &WachterParams::default())?, None)
            }
        };
        cf.origin_index = Some(index);
        let coords = self.place(&cf.series, &BTreeMap::new())?;
        Ok(CounterfactualResult {
            counterfactual: cf,
            guide_method,
            coords,
        })
    }
}
