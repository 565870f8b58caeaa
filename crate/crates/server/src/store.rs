//! On-disk session store: one directory per session holding a JSON
//! manifest and one JSON document per artifact.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::config::SessionConfig;
use crate::error::{Result, ServerError};

const MANIFEST: &str = "session.json";

/// Pipeline stages in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Load,
    Predict,
    Attributions,
    Evaluation,
    Transforms,
    Projections,
    Scoring,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).ok();
        f.write_str(s.as_ref().and_then(|v| v.as_str()).unwrap_or("?"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum Status {
    Pending,
    Running { stage: Stage },
    Done,
    Failed { stage: Stage, code: String, reason: String },
}

impl Status {
    pub fn is_terminal(&self) -> bool {
        matches!(self, Status::Done | Status::Failed { .. })
    }

    fn rank(&self) -> usize {
        match self {
            Status::Pending => 0,
            Status::Running { stage } => 1 + *stage as usize,
            Status::Done | Status::Failed { .. } => usize::MAX,
        }
    }

    /// Forward-only: pending, then running stages in order, then a terminal state.
    pub fn can_advance_to(&self, next: &Status) -> bool {
        if self.is_terminal() {
            return false;
        }
        match next {
            Status::Pending => false,
            Status::Running { .. } => next.rank() > self.rank(),
            Status::Done => matches!(self, Status::Running { .. }),
            Status::Failed { .. } => true,
        }
    }
}

impl fmt::Display for Status {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Status::Pending => f.write_str("pending"),
            Status::Running { stage } => write!(f, "running({stage})"),
            Status::Done => f.write_str("done"),
            Status::Failed { stage, code, reason } => write!(f, "failed({stage}, {code}: {reason})"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Artifact {
    Model,
    WorkingSet,
    Predictions,
    Attributions,
    Ranking,
    Transforms,
    Projections,
}

impl Artifact {
    pub fn file_name(self) -> &'static str {
        match self {
            Artifact::Model => "model.json",
            Artifact::WorkingSet => "working_set.json",
            Artifact::Predictions => "predictions.json",
            Artifact::Attributions => "attributions.json",
            Artifact::Ranking => "ranking.json",
            Artifact::Transforms => "transforms.json",
            Artifact::Projections => "projections.json",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionManifest {
    pub id: String,
    pub created_unix: u64,
    pub config: SessionConfig,
    pub status: Status,
    /// Artifact name to file name, in the order they were written.
    pub artifacts: BTreeMap<Artifact, String>,
    /// Failed with some artifacts left behind; they are kept for debugging.
    pub partial: bool,
}

/// Session directories live directly under `root`.
#[derive(Debug)]
pub struct SessionStore {
    root: PathBuf,
    locks: Mutex<HashMap<String, Arc<Mutex<()>>>>,
}

/// Session ids are generated UUIDs; anything else cannot name a session and
/// never reaches the filesystem.
fn valid_id(id: &str) -> bool {
    !id.is_empty() && id.len() <= 64 && id.bytes().all(|b| b.is_ascii_hexdigit() || b == b'-')
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("json.tmp");
    fs::write(&tmp, bytes).map_err(|e| ServerError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| ServerError::io(path, e))
}

impl SessionStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(|e| ServerError::io(&root, e))?;
        Ok(Self {
            root,
            locks: Mutex::new(HashMap::new()),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn dir(&self, id: &str) -> Result<PathBuf> {
        if !valid_id(id) {
            return Err(ServerError::NotFound(id.to_string()));
        }
        let dir = self.root.join(id);
        if dir.join(MANIFEST).is_file() {
            Ok(dir)
        } else {
            Err(ServerError::NotFound(id.to_string()))
        }
    }

    fn lock(&self, id: &str) -> Arc<Mutex<()>> {
        let mut locks = self.locks.lock().unwrap_or_else(|p| p.into_inner());
        locks.entry(id.to_string()).or_default().clone()
    }

    /// Validates `config`, creates the session directory and returns the new id.
    pub fn create(&self, config: SessionConfig) -> Result<String> {
        config.validate()?;
        let id = uuid::Uuid::new_v4().to_string();
        let dir = self.root.join(&id);
        fs::create_dir(&dir).map_err(|e| ServerError::io(&dir, e))?;
        let manifest = SessionManifest {
            id: id.clone(),
            created_unix: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
            config,
            status: Status::Pending,
            artifacts: BTreeMap::new(),
            partial: false,
        };
        self.write_manifest(&manifest)?;
        Ok(id)
    }

    fn write_manifest(&self, manifest: &SessionManifest) -> Result<()> {
        let text = serde_json::to_string_pretty(manifest).expect("manifest serializes");
        write_atomic(&self.root.join(&manifest.id).join(MANIFEST), text.as_bytes())
    }

    pub fn load(&self, id: &str) -> Result<SessionManifest> {
        let path = self.dir(id)?.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| ServerError::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| ServerError::CorruptManifest {
            path,
            reason: e.to_string(),
        })
    }

    /// Every readable session, oldest first. Unreadable directories are skipped.
    pub fn list(&self) -> Result<Vec<SessionManifest>> {
        let entries = fs::read_dir(&self.root).map_err(|e| ServerError::io(&self.root, e))?;
        let mut sessions = Vec::new();
        for entry in entries {
            let entry = entry.map_err(|e| ServerError::io(&self.root, e))?;
            let Some(name) = entry.file_name().to_str().map(str::to_string) else {
                continue;
            };
            match self.load(&name) {
                Ok(m) => sessions.push(m),
                Err(ServerError::NotFound(_)) => {}
                Err(e) => tracing::warn!("skipping session {name}: {e}"),
            }
        }
        sessions.sort_by(|a, b| a.created_unix.cmp(&b.created_unix).then_with(|| a.id.cmp(&b.id)));
        Ok(sessions)
    }

    /// Removes the session directory. Running sessions cannot be deleted.
    pub fn delete(&self, id: &str) -> Result<()> {
        let lock = self.lock(id);
        let _guard = lock.lock().unwrap_or_else(|p| p.into_inner());
        let manifest = self.load(id)?;
        if let Status::Running { .. } = manifest.status {
            return Err(ServerError::NotDone {
                id: id.to_string(),
                status: Box::new(manifest.status),
            });
        }
        let dir = self.dir(id)?;
        fs::remove_dir_all(&dir).map_err(|e| ServerError::io(&dir, e))
    }

    fn update(&self, id: &str, f: impl FnOnce(&mut SessionManifest) -> Result<()>) -> Result<SessionManifest> {
        let lock = self.lock(id);
        let _guard = lock.lock().unwrap_or_else(|p| p.into_inner());
        let mut manifest = self.load(id)?;
        f(&mut manifest)?;
        self.write_manifest(&manifest)?;
        Ok(manifest)
    }

    pub fn set_status(&self, id: &str, status: Status) -> Result<SessionManifest> {
        self.update(id, |m| {
            if !m.status.can_advance_to(&status) {
                return Err(ServerError::InvalidTransition {
                    id: m.id.clone(),
                    from: Box::new(m.status.clone()),
                    to: Box::new(status.clone()),
                });
            }
            m.partial = matches!(status, Status::Failed { .. }) && !m.artifacts.is_empty();
            m.status = status;
            Ok(())
        })
    }

    pub fn write_artifact<T: Serialize>(&self, id: &str, artifact: Artifact, value: &T) -> Result<()> {
        let path = self.dir(id)?.join(artifact.file_name());
        let text = serde_json::to_string(value).expect("artifact serializes");
        write_atomic(&path, text.as_bytes())?;
        self.update(id, |m| {
            m.artifacts.insert(artifact, artifact.file_name().to_string());
            Ok(())
        })?;
        Ok(())
    }

    pub fn artifact_path(&self, id: &str, artifact: Artifact) -> Result<PathBuf> {
        Ok(self.dir(id)?.join(artifact.file_name()))
    }

    pub fn read_artifact_text(&self, id: &str, artifact: Artifact) -> Result<String> {
        let path = self.artifact_path(id, artifact)?;
        fs::read_to_string(&path).map_err(|e| ServerError::io(&path, e))
    }

    pub fn read_artifact<T: DeserializeOwned>(&self, id: &str, artifact: Artifact) -> Result<T> {
        let text = self.read_artifact_text(id, artifact)?;
        serde_json::from_str(&text).map_err(|e| ServerError::Artifact {
            id: id.to_string(),
            name: artifact.file_name().to_string(),
            reason: e.to_string(),
        })
    }

    /// Loads a session and requires it to be done.
    pub fn load_done(&self, id: &str) -> Result<SessionManifest> {
        let manifest = self.load(id)?;
        if manifest.status != Status::Done {
            return Err(ServerError::NotDone {
                id: id.to_string(),
                status: Box::new(manifest.status),
            });
        }
        Ok(manifest)
    }
}
