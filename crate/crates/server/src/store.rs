//! Single-directory persistence: one manifest plus one landmark file per
//! project, and one model file plus metadata per trained model.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::OpenOptions;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use gestureforge_core::gesture::{GestureModel, LabeledFrame};
use gestureforge_core::landmark::{read_sequences, write_sequences_to, FrameLandmarks, FrameRecord, LandmarkSequence};
use gestureforge_core::modelfile::{self, Artifact};
use gestureforge_core::synth::BACKGROUND;
use serde::{Deserialize, Serialize};

use crate::error::ApiError;

pub fn now_ms() -> i64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as i64)
        .unwrap_or(0)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProjectManifest {
    pub id: String,
    pub name: String,
    pub classes: Vec<String>,
    pub created_ms: i64,
    pub updated_ms: i64,
    #[serde(default)]
    pub sample_keys: BTreeSet<String>,
}

#[derive(Debug, Clone)]
pub struct Project {
    pub manifest: ProjectManifest,
    pub samples: Vec<LabeledFrame>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ProjectSummary {
    pub id: String,
    pub name: String,
    pub classes: Vec<String>,
    pub sample_counts: BTreeMap<String, usize>,
    pub created_ms: i64,
    pub updated_ms: i64,
}

impl Project {
    pub fn summary(&self) -> ProjectSummary {
        let mut counts: BTreeMap<String, usize> = self.manifest.classes.iter().map(|c| (c.clone(), 0)).collect();
        for (_, label) in &self.samples {
            *counts.entry(label.clone()).or_default() += 1;
        }
        ProjectSummary {
            id: self.manifest.id.clone(),
            name: self.manifest.name.clone(),
            classes: self.manifest.classes.clone(),
            sample_counts: counts,
            created_ms: self.manifest.created_ms,
            updated_ms: self.manifest.updated_ms,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelMeta {
    pub id: String,
    pub project_id: Option<String>,
    pub job_id: Option<String>,
    pub label_map: Vec<String>,
    /// Hex SHA-256 of the model file.
    pub digest: String,
    pub size_bytes: usize,
    pub created_ms: i64,
}

#[derive(Clone)]
pub struct ModelEntry {
    pub meta: ModelMeta,
    pub model: Arc<GestureModel>,
}

/// A validated sample about to be appended.
pub struct NewSample {
    pub class: String,
    pub key: Option<String>,
    pub frame: FrameLandmarks,
}

#[derive(Debug, Clone, Serialize)]
pub struct AppendOutcome {
    pub accepted: usize,
    pub duplicates: usize,
    pub sample_counts: BTreeMap<String, usize>,
}

pub struct Store {
    root: PathBuf,
    projects: RwLock<HashMap<String, Arc<Mutex<Project>>>>,
    models: RwLock<HashMap<String, ModelEntry>>,
}

fn lock_err<T>(_: T) -> ApiError {
    ApiError::internal("store lock poisoned")
}

impl Store {
    /// Opens (creating if needed) a store rooted at `root` and loads its contents.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, ApiError> {
        let root = root.into();
        std::fs::create_dir_all(root.join("projects"))?;
        std::fs::create_dir_all(root.join("models"))?;
        let mut projects = HashMap::new();
        for entry in std::fs::read_dir(root.join("projects"))? {
            let path = entry?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("json") {
                continue;
            }
            let manifest: ProjectManifest = serde_json::from_slice(&std::fs::read(&path)?)
                .map_err(|e| ApiError::internal(format!("{}: {e}", path.display())))?;
            let samples_path = Self::samples_path_in(&root, &manifest.id);
            let samples = if samples_path.exists() {
                read_sequences(&samples_path)?
                    .into_iter()
                    .flat_map(|s| {
                        let label = s.label.unwrap_or_default();
                        s.frames.into_iter().map(move |f| (f, label.clone()))
                    })
                    .collect()
            } else {
                Vec::new()
            };
            projects.insert(manifest.id.clone(), Arc::new(Mutex::new(Project { manifest, samples })));
        }
        let mut models = HashMap::new();
        for entry in std::fs::read_dir(root.join("models"))? {
            let path = entry?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("json") {
                continue;
            }
            let meta: ModelMeta = serde_json::from_slice(&std::fs::read(&path)?)
                .map_err(|e| ApiError::internal(format!("{}: {e}", path.display())))?;
            let model = modelfile::load_model(&root.join("models").join(format!("{}.gfm", meta.id)))?;
            models.insert(
                meta.id.clone(),
                ModelEntry {
                    meta,
                    model: Arc::new(model),
                },
            );
        }
        Ok(Store {
            root,
            projects: RwLock::new(projects),
            models: RwLock::new(models),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn samples_path_in(root: &Path, id: &str) -> PathBuf {
        root.join("projects").join(format!("{id}.lmk.jsonl"))
    }

    fn manifest_path(&self, id: &str) -> PathBuf {
        self.root.join("projects").join(format!("{id}.json"))
    }

    fn write_manifest(&self, m: &ProjectManifest) -> Result<(), ApiError> {
        let path = self.manifest_path(&m.id);
        let tmp = path.with_extension("json.tmp");
        std::fs::write(
            &tmp,
            serde_json::to_vec_pretty(m).map_err(|e| ApiError::internal(e.to_string()))?,
        )?;
        std::fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn create_project(&self, name: &str, classes: &[String]) -> Result<ProjectSummary, ApiError> {
        if name.trim().is_empty() {
            return Err(ApiError::bad_request("invalid_name", "project name must not be empty"));
        }
        let mut all = vec![BACKGROUND.to_string()];
        for c in classes {
            validate_class_name(c)?;
            if all.contains(c) {
                return Err(ApiError::conflict(format!("duplicate class name {c:?}")));
            }
            all.push(c.clone());
        }
        let now = now_ms();
        let manifest = ProjectManifest {
            id: uuid::Uuid::new_v4().simple().to_string(),
            name: name.to_string(),
            classes: all,
            created_ms: now,
            updated_ms: now,
            sample_keys: BTreeSet::new(),
        };
        self.write_manifest(&manifest)?;
        let project = Project {
            manifest,
            samples: Vec::new(),
        };
        let summary = project.summary();
        self.projects
            .write()
            .map_err(lock_err)?
            .insert(summary.id.clone(), Arc::new(Mutex::new(project)));
        Ok(summary)
    }

    pub fn project(&self, id: &str) -> Result<Arc<Mutex<Project>>, ApiError> {
        self.projects
            .read()
            .map_err(lock_err)?
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found("project", id))
    }

    pub fn list_projects(&self) -> Result<Vec<ProjectSummary>, ApiError> {
        let projects = self.projects.read().map_err(lock_err)?;
        let mut out = Vec::with_capacity(projects.len());
        for p in projects.values() {
            out.push(p.lock().map_err(lock_err)?.summary());
        }
        out.sort_by(|a, b| (a.created_ms, &a.id).cmp(&(b.created_ms, &b.id)));
        Ok(out)
    }

    pub fn add_class(&self, id: &str, name: &str) -> Result<ProjectSummary, ApiError> {
        validate_class_name(name)?;
        let project = self.project(id)?;
        let mut p = project.lock().map_err(lock_err)?;
        if p.manifest.classes.iter().any(|c| c == name) {
            return Err(ApiError::conflict(format!("class {name:?} already exists")));
        }
        let mut manifest = p.manifest.clone();
        manifest.classes.push(name.to_string());
        manifest.updated_ms = now_ms();
        self.write_manifest(&manifest)?;
        p.manifest = manifest;
        Ok(p.summary())
    }

    /// Appends samples whose dedup key has not been seen. The whole request is
    /// rejected if any sample names an unknown class.
    pub fn append_samples(&self, id: &str, samples: Vec<NewSample>) -> Result<AppendOutcome, ApiError> {
        let project = self.project(id)?;
        let mut p = project.lock().map_err(lock_err)?;
        for (i, s) in samples.iter().enumerate() {
            if !p.manifest.classes.contains(&s.class) {
                return Err(ApiError::bad_request(
                    "unknown_class",
                    format!("sample {i}: class {:?} is not in the project", s.class),
                ));
            }
        }
        let mut manifest = p.manifest.clone();
        let mut fresh = Vec::new();
        let mut duplicates = 0;
        for mut s in samples {
            // Keep memory identical to what a reload from disk would produce.
            s.frame = FrameRecord::from_frame(&s.frame).to_frame()?;
            if let Some(k) = &s.key {
                if !manifest.sample_keys.insert(k.clone()) {
                    duplicates += 1;
                    continue;
                }
            }
            fresh.push(s);
        }
        if !fresh.is_empty() {
            let seqs: Vec<LandmarkSequence> = fresh
                .iter()
                .map(|s| LandmarkSequence::new(vec![s.frame.clone()], Some(s.class.clone())))
                .collect();
            let file = OpenOptions::new()
                .create(true)
                .append(true)
                .open(Self::samples_path_in(&self.root, id))?;
            let mut w = std::io::BufWriter::new(file);
            write_sequences_to(&mut w, &seqs)?;
            std::io::Write::flush(&mut w)?;
            manifest.updated_ms = now_ms();
            self.write_manifest(&manifest)?;
        }
        p.manifest = manifest;
        let accepted = fresh.len();
        p.samples.extend(fresh.into_iter().map(|s| (s.frame, s.class)));
        Ok(AppendOutcome {
            accepted,
            duplicates,
            sample_counts: p.summary().sample_counts,
        })
    }

    /// Copy of a project's classes and samples, taken under its lock.
    pub fn snapshot(&self, id: &str) -> Result<(Vec<String>, Vec<LabeledFrame>), ApiError> {
        let project = self.project(id)?;
        let p = project.lock().map_err(lock_err)?;
        Ok((p.manifest.classes.clone(), p.samples.clone()))
    }

    pub fn add_model(
        &self,
        model: GestureModel,
        project_id: Option<String>,
        job_id: Option<String>,
    ) -> Result<ModelMeta, ApiError> {
        let bytes = modelfile::to_bytes(&Artifact::Gesture(model.clone()))?;
        let id = uuid::Uuid::new_v4().simple().to_string();
        let meta = ModelMeta {
            id: id.clone(),
            project_id,
            job_id,
            label_map: model.label_map.clone(),
            digest: modelfile::file_digest(&bytes),
            size_bytes: bytes.len(),
            created_ms: now_ms(),
        };
        let dir = self.root.join("models");
        let tmp = dir.join(format!("{id}.gfm.tmp"));
        std::fs::write(&tmp, &bytes)?;
        std::fs::rename(&tmp, dir.join(format!("{id}.gfm")))?;
        std::fs::write(
            dir.join(format!("{id}.json")),
            serde_json::to_vec_pretty(&meta).map_err(|e| ApiError::internal(e.to_string()))?,
        )?;
        self.models.write().map_err(lock_err)?.insert(
            id,
            ModelEntry {
                meta: meta.clone(),
                model: Arc::new(model),
            },
        );
        Ok(meta)
    }

    pub fn model(&self, id: &str) -> Result<ModelEntry, ApiError> {
        self.models
            .read()
            .map_err(lock_err)?
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found("model", id))
    }

    pub fn model_bytes(&self, id: &str) -> Result<Vec<u8>, ApiError> {
        self.model(id)?;
        Ok(std::fs::read(self.root.join("models").join(format!("{id}.gfm")))?)
    }

    pub fn list_models(&self) -> Result<Vec<ModelMeta>, ApiError> {
        let mut out: Vec<ModelMeta> = self
            .models
            .read()
            .map_err(lock_err)?
            .values()
            .map(|e| e.meta.clone())
            .collect();
        out.sort_by(|a, b| (a.created_ms, &a.id).cmp(&(b.created_ms, &b.id)));
        Ok(out)
    }
}

fn validate_class_name(name: &str) -> Result<(), ApiError> {
    if name.trim().is_empty() || name.len() > 64 {
        return Err(ApiError::bad_request(
            "invalid_class_name",
            "class names must be 1-64 characters",
        ));
    }
    if name == BACKGROUND {
        return Err(ApiError::conflict(format!("{BACKGROUND:?} is always present")));
    }
    Ok(())
}
