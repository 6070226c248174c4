//! The per-run manifest: what was asked for and every stage produced since.

use std::collections::BTreeMap;
use std::path::PathBuf;

use chrono::{DateTime, Utc};
use neurodebug::counterfactual::OmegaConfig;
use neurodebug::model::ModelDescriptor;
use neurodebug::scenarios::ScenarioSpec;
use serde::{Deserialize, Serialize};

use crate::config::WorkbenchConfig;

/// Where a run's images come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetDescriptor {
    /// Rendered on demand from the scenario spec.
    Planted { spec: ScenarioSpec },
    /// `root/{split}/{class}/*.png`, with or without `metadata.json`. A
    /// missing `val` split is carved out of `train`.
    ImageFolder {
        root: PathBuf,
        #[serde(default = "default_val_fraction")]
        val_fraction: f64,
        #[serde(default)]
        split_seed: u64,
    },
}

fn default_val_fraction() -> f64 {
    0.2
}

fn default_split() -> String {
    "test".into()
}

fn default_top_k() -> usize {
    5
}

fn default_core_threshold() -> f64 {
    0.03
}

/// Body of `POST /runs` and the `inspect` verb.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRequest {
    pub model: ModelDescriptor,
    pub dataset: DatasetDescriptor,
    /// Class whose mistakes are explained.
    pub class_id: usize,
    /// Fit the decision layer on frozen training features before inspecting,
    /// for registry models whose head is untrained.
    #[serde(default)]
    pub fit_decision_layer: bool,
    /// Split the mistakes are collected from.
    #[serde(default = "default_split")]
    pub mistake_split: String,
    #[serde(default)]
    pub omega: OmegaConfig,
    #[serde(default = "default_top_k")]
    pub top_k: usize,
    #[serde(default = "default_core_threshold")]
    pub core_threshold: f64,
}

impl RunRequest {
    pub fn new(model: ModelDescriptor, dataset: DatasetDescriptor, class_id: usize) -> Self {
        Self {
            model,
            dataset,
            class_id,
            fit_decision_layer: false,
            mistake_split: default_split(),
            omega: OmegaConfig::default(),
            top_k: default_top_k(),
            core_threshold: default_core_threshold(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Pending,
    Running,
    Completed,
    /// The model gets every sample of the class right; nothing to rank.
    NoMistakes,
    Failed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageKind {
    DecisionLayer,
    Metrics,
    Mistakes,
    Counterfactual,
    Ranking,
    Gallery,
    Edit,
    Failure,
}

/// One appended stage. `artifacts` maps a role to a path relative to the
/// run directory; `digests` holds the SHA-256 of each of those files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub kind: StageKind,
    /// Content hash of the request that produced the stage, where one exists.
    #[serde(default)]
    pub key: Option<String>,
    pub artifacts: BTreeMap<String, String>,
    pub digests: BTreeMap<String, String>,
    pub created_at: DateTime<Utc>,
    #[serde(default)]
    pub summary: serde_json::Value,
    #[serde(default)]
    pub error: Option<String>,
}

impl StageRecord {
    pub fn new(kind: StageKind) -> Self {
        Self {
            kind,
            key: None,
            artifacts: BTreeMap::new(),
            digests: BTreeMap::new(),
            created_at: Utc::now(),
            summary: serde_json::Value::Null,
            error: None,
        }
    }

    pub fn artifact(&self, role: &str) -> Option<&str> {
        self.artifacts.get(role).map(String::as_str)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub request: RunRequest,
    pub config: WorkbenchConfig,
    pub created_at: DateTime<Utc>,
    pub updated_at: DateTime<Utc>,
    pub status: RunStatus,
    pub stages: Vec<StageRecord>,
}

impl RunManifest {
    /// The most recent stage of `kind`.
    pub fn latest(&self, kind: StageKind) -> Option<&StageRecord> {
        self.stages.iter().rev().find(|s| s.kind == kind)
    }

    pub fn stages_of(&self, kind: StageKind) -> impl Iterator<Item = &StageRecord> {
        self.stages.iter().filter(move |s| s.kind == kind)
    }

    pub fn find_keyed(&self, kind: StageKind, key: &str) -> Option<&StageRecord> {
        self.stages_of(kind).find(|s| s.key.as_deref() == Some(key))
    }
}
