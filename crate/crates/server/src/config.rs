//! Session configuration as submitted by the CLI or `POST /api/sessions`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tsexplain_core::attributions::{AttributionParams, Method};
use tsexplain_core::data::Delimiter;
use tsexplain_core::eval::PerturbationConfig;
use tsexplain_core::nn::TrainConfig;
use tsexplain_core::projections::{ProjectionParams, ScoreWeights, Technique};
use tsexplain_core::transforms::{SaxParams, TransformKind};

use crate::error::{Result, ServerError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSource {
    /// UCR file; every sample is training data unless `test` is given.
    pub train: PathBuf,
    #[serde(default)]
    pub test: Option<PathBuf>,
    #[serde(default)]
    pub delimiter: Delimiter,
    /// z-normalize every series before use.
    #[serde(default)]
    pub z_normalize: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    #[default]
    A,
    B,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainRequest {
    pub architecture: Architecture,
    pub config: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelSource {
    /// Model manifest on disk.
    Path(PathBuf),
    /// Train on the training split during the load stage.
    Train(TrainRequest),
}

fn default_methods() -> Vec<Method> {
    vec![Method::Saliency, Method::IntegratedGradients, Method::Occlusion]
}

fn default_transforms() -> Vec<TransformKind> {
    TransformKind::ALL.to_vec()
}

fn default_techniques() -> Vec<Technique> {
    Technique::ALL.to_vec()
}

fn default_train_cap() -> usize {
    2000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionConfig {
    pub dataset: DatasetSource,
    pub model: ModelSource,
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    #[serde(default)]
    pub attribution: AttributionParams,
    /// Perturbation grid; the default grid when absent.
    #[serde(default)]
    pub perturbation: Option<Vec<PerturbationConfig>>,
    #[serde(default = "default_transforms")]
    pub transforms: Vec<TransformKind>,
    #[serde(default)]
    pub sax: SaxParams,
    #[serde(default = "default_techniques")]
    pub techniques: Vec<Technique>,
    #[serde(default)]
    pub projection: ProjectionParams,
    #[serde(default)]
    pub weights: ScoreWeights,
    /// Training samples added to the test split for attributions and projections.
    #[serde(default = "default_train_cap")]
    pub train_subsample: usize,
    #[serde(default)]
    pub seed: u64,
}

impl SessionConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| ServerError::InvalidConfig(e.to_string()))
    }

    /// Makes relative paths relative to `base` (the config file's directory).
    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.dataset.train);
        if let Some(test) = self.dataset.test.as_mut() {
            fix(test);
        }
        if let ModelSource::Path(p) = &mut self.model {
            fix(p);
        }
    }

    /// Structural checks plus existence of every referenced file.
    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            return Err(ServerError::InvalidConfig("at least one attribution method is required".into()));
        }
        if self.techniques.is_empty() {
            return Err(ServerError::InvalidConfig("at least one projection technique is required".into()));
        }
        if let Some(grid) = &self.perturbation {
            if grid.is_empty() {
                return Err(ServerError::InvalidConfig("perturbation grid is empty".into()));
            }
            for c in grid {
                c.validate()?;
            }
        }
        if let ModelSource::Train(req) = &self.model {
            req.config.validate()?;
        }
        if !(self.weights.predictions >= 0.0 && self.weights.labels >= 0.0)
            || self.weights.predictions + self.weights.labels <= 0.0
        {
            return Err(ServerError::InvalidConfig("score weights must be non-negative with a positive sum".into()));
        }
        let mut files = vec![&self.dataset.train];
        files.extend(self.dataset.test.as_ref());
        if let ModelSource::Path(p) = &self.model {
            files.push(p);
        }
        match files.into_iter().find(|p| !p.is_file()) {
            Some(missing) => Err(ServerError::FileNotFound(missing.clone())),
            None => Ok(()),
        }
    }

    pub fn perturbation_grid(&self) -> Vec<PerturbationConfig> {
        self.perturbation
            .clone()
            .unwrap_or_else(|| tsexplain_core::eval::default_grid(self.seed))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_takes_defaults() {
        let c = SessionConfig::from_json(r#"{"dataset": {"train": "a.tsv"}, "model": {"train": {}}}"#).unwrap();
        assert_eq!(c.methods.len(), 3);
        assert_eq!(c.transforms.len(), 5);
        assert_eq!(c.train_subsample, 2000);
        assert_eq!(c.perturbation_grid().len(), 7);
        assert_eq!(c.model, ModelSource::Train(TrainRequest::default()));
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let err = SessionConfig::from_json(r#"{"dataset": {"train": "a"}, "model": {"path": "m"}, "sed": 1}"#).unwrap_err();
        assert!(matches!(err, ServerError::InvalidConfig(_)));
    }

    #[test]
    fn missing_dataset_is_file_not_found() {
        let c = SessionConfig::from_json(r#"{"dataset": {"train": "/nonexistent/x.tsv"}, "model": {"train": {}}}"#).unwrap();
        assert!(matches!(c.validate(), Err(ServerError::FileNotFound(_))));
    }

    #[test]
    fn empty_method_list_is_invalid() {
        let c = SessionConfig::from_json(r#"{"dataset": {"train": "x"}, "model": {"train": {}}, "methods": []}"#).unwrap();
        assert!(matches!(c.validate(), Err(ServerError::InvalidConfig(_))));
    }

    #[test]
    fn relative_paths_follow_the_config_file() {
        let mut c = SessionConfig::from_json(r#"{"dataset": {"train": "d/x.tsv", "test": "/abs/y.tsv"}, "model": {"path": "m.json"}}"#).unwrap();
        c.resolve_paths(Path::new("/cfg"));
        assert_eq!(c.dataset.train, PathBuf::from("/cfg/d/x.tsv"));
        assert_eq!(c.dataset.test, Some(PathBuf::from("/abs/y.tsv")));
        assert_eq!(c.model, ModelSource::Path(PathBuf::from("/cfg/m.json")));
    }
}
