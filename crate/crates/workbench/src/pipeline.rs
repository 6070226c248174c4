//! Headless run pipeline. The HTTP handlers and the CLI both call into
//! [`Workbench`]; nothing here knows about jobs or sockets.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;
use std::sync::{Arc, Mutex, OnceLock};

use neurodebug::counterfactual::{explain_mistakes, rank_neurons, select_core_neurons, OmegaResult, RankingReport};
use neurodebug::editor::{edit_decision_layer, suggest_o, EditMethod, EditPlan, EditTarget};
use neurodebug::evaluation::{compare_edits, predict_split, DeltaReport, EditSnapshot, MetricsReport, Predictions};
use neurodebug::model::{
    load_decision_layer, save_decision_layer, split_classifier, ClassifierHandle, FeatureVector, ModelDescriptor,
};
use neurodebug::scenarios::{
    collect_mistakes, load_image_folder, split_validation, synth_planted_dataset, Dataset, MistakeSet,
};
use neurodebug::train::{train_decision_layer, LabeledFeatures, NoRegularizer, TrainConfig};
use neurodebug::visualizer::{
    class_representative, core_relevance, generate_gallery, generate_illusion, save_gallery, IllusionResult,
    IllusionSpec, DEFAULT_GALLERY_CLASSES,
};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::WorkbenchConfig;
use crate::error::{Result, WorkbenchError};
use crate::manifest::{DatasetDescriptor, RunManifest, RunRequest, RunStatus, StageKind, StageRecord};
use crate::store::{content_key, RunStore};

pub const RANKING_FILE: &str = "ranking.json";
pub const LAYER_FILE: &str = "decision_layer.safetensors";

/// Train, validation and test splits of a run's dataset.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

impl Splits {
    pub fn get(&self, name: &str) -> Result<&Dataset> {
        match name {
            "train" => Ok(&self.train),
            "val" => Ok(&self.val),
            "test" => Ok(&self.test),
            other => Err(WorkbenchError::InvalidRequest(format!(
                "unknown split {other:?}; expected train, val or test"
            ))),
        }
    }

    pub fn class_names(&self) -> &[String] {
        &self.train.class_names
    }
}

pub fn load_splits(dataset: &DatasetDescriptor) -> Result<Splits> {
    match dataset {
        DatasetDescriptor::Planted { spec } => {
            let d = synth_planted_dataset(spec)?;
            Ok(Splits {
                train: d.train,
                val: d.val,
                test: d.test,
            })
        }
        DatasetDescriptor::ImageFolder {
            root,
            val_fraction,
            split_seed,
        } => {
            let train = load_image_folder(root, "train")?;
            let test = load_image_folder(root, "test")?;
            let val = match load_image_folder(root, "val") {
                Ok(v) if !v.is_empty() => v,
                _ => {
                    let (rest, val) = split_validation(&train, *val_fraction, *split_seed)?;
                    return Ok(Splits { train: rest, val, test });
                }
            };
            Ok(Splits { train, val, test })
        }
    }
}

/// Fill in what a registry descriptor leaves open from the dataset.
pub fn resolve_model(model: &ModelDescriptor, splits: &Splits) -> ModelDescriptor {
    let mut model = model.clone();
    if let ModelDescriptor::Registry {
        class_names,
        input_size,
        ..
    } = &mut model
    {
        if class_names.is_none() {
            *class_names = Some(splits.class_names().to_vec());
        }
        if input_size.is_none() {
            *input_size = splits.train.samples.first().map(|s| s.image.height);
        }
    }
    model
}

fn probe_seed(dataset: &DatasetDescriptor) -> u64 {
    match dataset {
        DatasetDescriptor::Planted { spec } => spec.seed,
        DatasetDescriptor::ImageFolder { split_seed, .. } => *split_seed,
    }
}

/// Everything needed to work on a run, loaded once and cached.
pub struct RunContext {
    pub splits: Splits,
    /// Carries the run's base decision layer.
    pub handle: ClassifierHandle,
    train: OnceLock<LabeledFeatures>,
    val: OnceLock<LabeledFeatures>,
    representatives: Mutex<HashMap<usize, FeatureVector>>,
}

impl fmt::Debug for RunContext {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RunContext").field("handle", &self.handle).finish()
    }
}

impl RunContext {
    fn new(splits: Splits, handle: ClassifierHandle) -> Self {
        Self {
            splits,
            handle,
            train: OnceLock::new(),
            val: OnceLock::new(),
            representatives: Mutex::new(HashMap::new()),
        }
    }

    fn features<'a>(&'a self, cell: &'a OnceLock<LabeledFeatures>, split: &Dataset) -> Result<&'a LabeledFeatures> {
        if let Some(f) = cell.get() {
            return Ok(f);
        }
        let f = LabeledFeatures::from_dataset(&self.handle, split)?;
        Ok(cell.get_or_init(|| f))
    }

    pub fn train_features(&self) -> Result<&LabeledFeatures> {
        self.features(&self.train, &self.splits.train)
    }

    pub fn val_features(&self) -> Result<&LabeledFeatures> {
        self.features(&self.val, &self.splits.val)
    }

    fn representative(&self, split: &Dataset, class_id: usize) -> Result<FeatureVector> {
        let mut map = self.representatives.lock().unwrap_or_else(|e| e.into_inner());
        if let Some(r) = map.get(&class_id) {
            return Ok(r.clone());
        }
        let r = class_representative(&self.handle, split, class_id)?;
        map.insert(class_id, r.clone());
        Ok(r)
    }
}

/// Which classes each neuron is visualised for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClassMode {
    /// The run's own class only.
    TargetClass,
    /// The `k` classes that weight the neuron most.
    Auto { k: usize },
}

impl Default for ClassMode {
    fn default() -> Self {
        ClassMode::Auto {
            k: DEFAULT_GALLERY_CLASSES,
        }
    }
}

impl fmt::Display for ClassMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ClassMode::TargetClass => write!(f, "target"),
            ClassMode::Auto { k } => write!(f, "auto:{k}"),
        }
    }
}

impl FromStr for ClassMode {
    type Err = WorkbenchError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || WorkbenchError::InvalidRequest(format!("classes must be \"target\" or \"auto:K\", got {s:?}"));
        match s {
            "target" => Ok(ClassMode::TargetClass),
            "auto" => Ok(ClassMode::default()),
            _ => {
                let k: usize = s.strip_prefix("auto:").ok_or_else(bad)?.parse().map_err(|_| bad())?;
                if k == 0 {
                    return Err(bad());
                }
                Ok(ClassMode::Auto { k })
            }
        }
    }
}

impl Serialize for ClassMode {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ClassMode {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct VisualOverrides {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub learning_rate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_threshold: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub encoder: Option<String>,
}

/// Body of `POST /runs/{id}/visualizations`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisualizationRequest {
    pub neurons: Vec<usize>,
    #[serde(default)]
    pub classes: ClassMode,
    #[serde(default, flatten)]
    pub overrides: VisualOverrides,
}

impl VisualizationRequest {
    pub fn spec(&self, neuron_id: usize) -> IllusionSpec {
        let o = &self.overrides;
        let mut spec = IllusionSpec::new(neuron_id, None);
        spec.steps = o.steps.unwrap_or(spec.steps);
        spec.gamma = o.gamma.unwrap_or(spec.gamma);
        spec.epsilon = o.epsilon.unwrap_or(spec.epsilon);
        spec.learning_rate = o.learning_rate.unwrap_or(spec.learning_rate);
        spec.seed = o.seed.unwrap_or(spec.seed);
        spec.mask_threshold = o.mask_threshold.unwrap_or(spec.mask_threshold);
        if let Some(e) = &o.encoder {
            spec.encoder = e.clone();
        }
        spec
    }

    pub fn key(&self) -> Result<String> {
        let mut neurons = self.neurons.clone();
        neurons.sort_unstable();
        neurons.dedup();
        content_key(&json!({ "neurons": neurons, "classes": self.classes, "overrides": self.overrides }))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GalleryEntry {
    pub neuron_id: usize,
    pub class_id: Option<usize>,
    pub class_name: Option<String>,
    pub activation: f64,
    pub class_logit: Option<f64>,
    pub clip_alignment: Option<f64>,
    /// `None` when the neuron never fired on the image.
    pub core_relevance: Option<f64>,
    pub mask_degenerate: bool,
    /// Paths relative to the run directory.
    pub image: String,
    pub masked_image: String,
    pub trace: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GalleryIndex {
    pub key: String,
    pub request: VisualizationRequest,
    pub representative_split: String,
    pub entries: Vec<GalleryEntry>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditPreset {
    #[default]
    Default,
    /// Keep the last epoch and run every epoch; for validation splits that
    /// carry the confound.
    Planted,
}

/// Body of `POST /runs/{id}/edits`: either a complete `plan`, or `targets`
/// plus optional settings applied on top of a preset.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EditRequest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plan: Option<EditPlan>,
    #[serde(default)]
    pub targets: Vec<EditTarget>,
    #[serde(default)]
    pub preset: EditPreset,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub method: Option<EditMethod>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub o: Option<f64>,
    /// Derive `o` from the ratios at the mistake set's mean features.
    #[serde(default)]
    pub suggest_o: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda3: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

/// Parse `class:neuron` pairs separated by commas.
pub fn parse_targets(s: &str) -> Result<Vec<EditTarget>> {
    s.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| {
            let (c, k) = p
                .trim()
                .split_once(':')
                .ok_or_else(|| WorkbenchError::InvalidRequest(format!("target {p:?} is not class:neuron")))?;
            let parse = |v: &str| {
                v.parse::<usize>()
                    .map_err(|_| WorkbenchError::InvalidRequest(format!("target {p:?} is not class:neuron")))
            };
            Ok(EditTarget {
                class_id: parse(c)?,
                neuron_id: parse(k)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditSummary {
    pub key: String,
    pub plan: EditPlan,
    pub metrics: BTreeMap<String, MetricsReport>,
    pub delta: DeltaReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsView {
    pub base: BTreeMap<String, MetricsReport>,
    pub edits: Vec<EditSummary>,
}

/// What a finished stage hands back to its caller.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageOutcome {
    pub run_id: String,
    pub kind: StageKind,
    pub key: Option<String>,
    pub summary: Value,
}

impl StageOutcome {
    fn of(run_id: &str, stage: &StageRecord) -> Self {
        Self {
            run_id: run_id.into(),
            kind: stage.kind,
            key: stage.key.clone(),
            summary: stage.summary.clone(),
        }
    }
}

/// Collects artifacts for one stage before it is appended.
struct StageBuilder<'a> {
    store: &'a RunStore,
    run_id: &'a str,
    stage: StageRecord,
}

impl<'a> StageBuilder<'a> {
    fn new(store: &'a RunStore, run_id: &'a str, kind: StageKind) -> Self {
        Self {
            store,
            run_id,
            stage: StageRecord::new(kind),
        }
    }

    fn bytes(&mut self, role: &str, rel: &str, bytes: &[u8]) -> Result<()> {
        let digest = self.store.write_artifact(self.run_id, rel, bytes)?;
        self.record(role, rel, digest);
        Ok(())
    }

    fn json<T: Serialize>(&mut self, role: &str, rel: &str, value: &T) -> Result<()> {
        self.bytes(role, rel, &serde_json::to_vec_pretty(value)?)
    }

    /// A file some library routine already wrote into the run directory.
    fn existing(&mut self, role: &str, rel: &str) -> Result<()> {
        let digest = self.store.digest_existing(self.run_id, rel)?;
        self.record(role, rel, digest);
        Ok(())
    }

    fn record(&mut self, role: &str, rel: &str, digest: String) {
        self.stage.artifacts.insert(role.into(), rel.into());
        self.stage.digests.insert(rel.into(), digest);
    }

    fn finish(self, status: Option<RunStatus>) -> Result<StageRecord> {
        let stage = self.stage.clone();
        self.store.append_stage(self.run_id, self.stage, status)?;
        Ok(stage)
    }
}

fn layer_bytes(layer: &neurodebug::model::DecisionLayer) -> Result<Vec<u8>> {
    let dir = tempfile_dir()?;
    let path = dir.join(LAYER_FILE);
    save_decision_layer(&path, layer)?;
    let bytes = std::fs::read(&path)?;
    let _ = std::fs::remove_dir_all(&dir);
    Ok(bytes)
}

fn tempfile_dir() -> Result<std::path::PathBuf> {
    use std::sync::atomic::{AtomicU64, Ordering};
    static N: AtomicU64 = AtomicU64::new(0);
    let dir = std::env::temp_dir().join(format!(
        "neurodebug-{}-{}",
        std::process::id(),
        N.fetch_add(1, Ordering::Relaxed)
    ));
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn metric_splits(request: &RunRequest) -> Vec<String> {
    let mut s = vec!["val".to_string(), "test".to_string()];
    if !s.contains(&request.mistake_split) {
        s.push(request.mistake_split.clone());
    }
    s
}

fn mean_of_mistakes(handle: &ClassifierHandle, split: &Dataset, mistakes: &MistakeSet) -> Result<Option<FeatureVector>> {
    let images: Vec<_> = mistakes
        .samples
        .iter()
        .map(|m| split.samples[m.sample_index].image.clone())
        .collect();
    if images.is_empty() {
        return Ok(None);
    }
    Ok(FeatureVector::mean_of(&handle.extract_features(&images)?))
}

/// Rank flipped samples, or all samples when none flipped.
fn rank_results(results: &[OmegaResult], k: usize) -> Result<(RankingReport, bool)> {
    let flipped_only = results.iter().any(|r| r.flipped);
    Ok((rank_neurons(results, k, flipped_only)?, flipped_only))
}

/// Stored body of `GET /runs/{id}/ranking`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingView {
    pub class_id: usize,
    pub class_name: String,
    pub mistake_split: String,
    pub n_mistakes: usize,
    pub core_threshold: f64,
    /// Whether only flipped samples were ranked. When no sample flips, every
    /// sample is ranked instead.
    pub flipped_only: bool,
    /// Neurons at or above the threshold, most frequent first.
    pub core_neurons: Vec<usize>,
    pub report: RankingReport,
}

#[derive(Debug)]
pub struct Workbench {
    pub store: RunStore,
    pub config: WorkbenchConfig,
    contexts: Mutex<HashMap<String, Arc<RunContext>>>,
}

impl Workbench {
    pub fn open(config: WorkbenchConfig) -> Result<Self> {
        Ok(Self {
            store: RunStore::open(&config.store)?,
            config,
            contexts: Mutex::new(HashMap::new()),
        })
    }

    /// Cheap checks before a run is accepted.
    pub fn validate_request(&self, request: &RunRequest) -> Result<()> {
        let bad = |m: String| Err(WorkbenchError::InvalidRequest(m));
        match &request.dataset {
            DatasetDescriptor::Planted { spec } => spec.validate()?,
            DatasetDescriptor::ImageFolder { root, val_fraction, .. } => {
                if !root.is_dir() {
                    return bad(format!("dataset root {} is not a directory", root.display()));
                }
                if !(*val_fraction > 0.0 && *val_fraction < 1.0) {
                    return bad(format!("val_fraction {val_fraction} not in (0, 1)"));
                }
            }
        }
        match &request.model {
            ModelDescriptor::Registry { name, num_classes, .. } => {
                if !neurodebug::model::REGISTRY.contains(&name.as_str()) {
                    return bad(format!(
                        "unknown model {name:?}; registry has {:?}",
                        neurodebug::model::REGISTRY
                    ));
                }
                if request.class_id >= *num_classes {
                    return bad(format!("class_id {} out of range for {num_classes} classes", request.class_id));
                }
            }
            ModelDescriptor::File { path, decision_layer } => {
                if !path.is_file() {
                    return bad(format!("model file {} not found", path.display()));
                }
                if let Some(p) = decision_layer {
                    if !p.is_file() {
                        return bad(format!("decision layer file {} not found", p.display()));
                    }
                }
            }
        }
        if request.top_k == 0 {
            return bad("top_k must be positive".into());
        }
        if !(0.0..=1.0).contains(&request.core_threshold) {
            return bad(format!("core_threshold {} not in [0, 1]", request.core_threshold));
        }
        if !(request.omega.lambda1 >= 0.0 && request.omega.lambda2 >= 0.0) {
            return bad("lambda1 and lambda2 must be non-negative".into());
        }
        if !["train", "val", "test"].contains(&request.mistake_split.as_str()) {
            return bad(format!("unknown split {:?}", request.mistake_split));
        }
        Ok(())
    }

    /// Validate and record a new run; the work itself is [`Workbench::execute_run`].
    pub fn create_run(&self, request: &RunRequest) -> Result<RunManifest> {
        self.validate_request(request)?;
        self.store.create(request, &self.config)
    }

    pub fn manifest(&self, run_id: &str) -> Result<RunManifest> {
        self.store.load(run_id)
    }

    /// Load (or reuse) the data and base model of a run.
    pub fn context(&self, run_id: &str) -> Result<Arc<RunContext>> {
        if let Some(c) = self.contexts.lock().unwrap_or_else(|e| e.into_inner()).get(run_id) {
            return Ok(c.clone());
        }
        let manifest = self.store.load(run_id)?;
        let splits = load_splits(&manifest.request.dataset)?;
        let mut handle = split_classifier(&resolve_model(&manifest.request.model, &splits))?.handle;
        if let Some(stage) = manifest.latest(StageKind::DecisionLayer) {
            let rel = stage
                .artifact("layer")
                .ok_or_else(|| WorkbenchError::Artifact(format!("{run_id}: decision layer stage")))?;
            handle.set_decision_layer(load_decision_layer(&self.store.run_dir(run_id).join(rel))?)?;
        }
        let ctx = Arc::new(RunContext::new(splits, handle));
        self.contexts
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .insert(run_id.into(), ctx.clone());
        Ok(ctx)
    }

    /// Run every inspection stage, recording a failure stage on error.
    pub fn execute_run(&self, run_id: &str) -> Result<RunManifest> {
        self.store.set_status(run_id, RunStatus::Running)?;
        match self.inspect(run_id) {
            Ok(m) => Ok(m),
            Err(e) => {
                let mut stage = StageRecord::new(StageKind::Failure);
                stage.error = Some(e.to_string());
                self.store.append_stage(run_id, stage, Some(RunStatus::Failed))?;
                Err(e)
            }
        }
    }

    fn inspect(&self, run_id: &str) -> Result<RunManifest> {
        let manifest = self.store.load(run_id)?;
        let request = &manifest.request;
        let splits = load_splits(&request.dataset)?;
        let mut handle = split_classifier(&resolve_model(&request.model, &splits))?.handle;
        handle.decision_layer().check_class(request.class_id)?;
        if handle.num_classes() != splits.class_names().len() {
            return Err(WorkbenchError::InvalidRequest(format!(
                "model has {} classes, dataset has {}",
                handle.num_classes(),
                splits.class_names().len()
            )));
        }

        let mut ctx = RunContext::new(splits, handle.clone());
        if request.fit_decision_layer {
            let fit = train_decision_layer(
                &handle.decision_weights(),
                ctx.train_features()?,
                ctx.val_features()?,
                &NoRegularizer,
                &TrainConfig::probe(probe_seed(&request.dataset)),
            )?;
            handle.set_decision_layer(fit.layer.clone())?;
            // features do not depend on the decision layer, so they carry over
            let (train, val) = (ctx.train, ctx.val);
            ctx = RunContext::new(ctx.splits, handle.clone());
            ctx.train = train;
            ctx.val = val;
            let mut b = StageBuilder::new(&self.store, run_id, StageKind::DecisionLayer);
            b.bytes("layer", LAYER_FILE, &layer_bytes(&fit.layer)?)?;
            b.json("history", "decision_layer.history.json", &fit.history)?;
            b.stage.summary = json!({ "best_epoch": fit.best_epoch, "epochs": fit.history.len() - 1 });
            b.finish(None)?;
        }

        let mut b = StageBuilder::new(&self.store, run_id, StageKind::Metrics);
        b.stage.key = Some("base".into());
        let mut summary = serde_json::Map::new();
        for split in metric_splits(request) {
            let p = predict_split(&handle, ctx.splits.get(&split)?, None)?;
            let m = MetricsReport::from_predictions(&p)?;
            b.json(&format!("{split}.predictions"), &format!("metrics/base/{split}.predictions.json"), &p)?;
            b.json(&split, &format!("metrics/base/{split}.json"), &m)?;
            summary.insert(split, json!(m.avg_acc));
        }
        b.stage.summary = Value::Object(summary);
        b.finish(None)?;

        let split = ctx.splits.get(&request.mistake_split)?;
        let mistakes = collect_mistakes(&handle, split, request.class_id)?;
        let mut b = StageBuilder::new(&self.store, run_id, StageKind::Mistakes);
        b.json("mistakes", "mistakes.json", &mistakes)?;
        b.stage.summary = json!({ "count": mistakes.len(), "split": mistakes.source_split });
        if mistakes.is_empty() {
            b.finish(Some(RunStatus::NoMistakes))?;
            self.cache(run_id, ctx);
            return self.store.load(run_id);
        }
        b.finish(None)?;

        let results = explain_mistakes(&handle, split, &mistakes, &request.omega)?;
        let mut b = StageBuilder::new(&self.store, run_id, StageKind::Counterfactual);
        b.json("omega", "omega.json", &results)?;
        let flipped = results.iter().filter(|r| r.flipped).count();
        b.stage.summary = json!({ "samples": results.len(), "flipped": flipped });
        b.finish(None)?;

        let view = self.ranking_view(request, &handle, &mistakes, &results)?;
        let mut b = StageBuilder::new(&self.store, run_id, StageKind::Ranking);
        b.json("ranking", RANKING_FILE, &view)?;
        b.stage.summary = json!({ "core_neurons": view.core_neurons, "flip_rate": view.report.flip_rate() });
        b.finish(Some(RunStatus::Completed))?;
        self.cache(run_id, ctx);
        self.store.load(run_id)
    }

    fn cache(&self, run_id: &str, ctx: RunContext) {
        self.contexts
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .insert(run_id.into(), Arc::new(ctx));
    }

    fn ranking_view(
        &self,
        request: &RunRequest,
        handle: &ClassifierHandle,
        mistakes: &MistakeSet,
        results: &[OmegaResult],
    ) -> Result<RankingView> {
        let (report, flipped_only) = rank_results(results, request.top_k)?;
        Ok(RankingView {
            class_id: request.class_id,
            class_name: handle.class_names()[request.class_id].clone(),
            mistake_split: mistakes.source_split.clone(),
            n_mistakes: mistakes.len(),
            core_threshold: request.core_threshold,
            flipped_only,
            core_neurons: select_core_neurons(&report, request.core_threshold),
            report,
        })
    }

    /// Raw bytes of the stored ranking.
    pub fn ranking_bytes(&self, run_id: &str) -> Result<Vec<u8>> {
        let manifest = self.store.load(run_id)?;
        let stage = manifest
            .latest(StageKind::Ranking)
            .ok_or_else(|| WorkbenchError::NoRanking(run_id.into()))?;
        let rel = stage.artifact("ranking").unwrap_or(RANKING_FILE);
        self.store.read_artifact(run_id, rel)
    }

    pub fn ranking(&self, run_id: &str) -> Result<RankingView> {
        Ok(serde_json::from_slice(&self.ranking_bytes(run_id)?)?)
    }

    /// Reject requests that cannot produce a gallery.
    pub fn check_visualization(&self, run_id: &str, request: &VisualizationRequest) -> Result<()> {
        let ranking = self.ranking(run_id)?;
        if request.neurons.is_empty() {
            return Err(WorkbenchError::InvalidRequest("neurons must not be empty".into()));
        }
        let dim = ranking.report.feature_dim;
        if let Some(&neuron) = request.neurons.iter().find(|&&n| n >= dim) {
            return Err(WorkbenchError::UnknownNeuron { neuron, dim });
        }
        let spec = request.spec(0);
        if !(0.0..=1.0).contains(&spec.gamma) || spec.steps == 0 || !(spec.learning_rate > 0.0) {
            return Err(WorkbenchError::InvalidRequest("gamma in [0, 1], steps > 0 and learning_rate > 0 required".into()));
        }
        Ok(())
    }

    pub fn visualize(&self, run_id: &str, request: &VisualizationRequest) -> Result<StageOutcome> {
        self.check_visualization(run_id, request)?;
        let key = request.key()?;
        if let Some(stage) = self.store.load(run_id)?.find_keyed(StageKind::Gallery, &key) {
            return Ok(StageOutcome::of(run_id, stage));
        }
        let manifest = self.store.load(run_id)?;
        let ctx = self.context(run_id)?;
        let class_id = manifest.request.class_id;

        let mut neurons = request.neurons.clone();
        neurons.sort_unstable();
        neurons.dedup();
        let mut results: Vec<IllusionResult> = Vec::new();
        for &n in &neurons {
            let base = request.spec(n);
            match request.classes {
                ClassMode::TargetClass => results.push(generate_illusion(
                    &ctx.handle,
                    &IllusionSpec {
                        class_id: Some(class_id),
                        ..base
                    },
                )?),
                ClassMode::Auto { k } => results.extend(generate_gallery(&ctx.handle, &base, k)?),
            }
        }

        let dir_rel = format!("gallery/{key}");
        let dir = self.store.run_dir(run_id).join(&dir_rel);
        save_gallery(&dir, &results)?;

        let rep_split = ctx.splits.get(&self.config.representative_split)?;
        let mut b = StageBuilder::new(&self.store, run_id, StageKind::Gallery);
        b.stage.key = Some(key.clone());
        let mut entries = Vec::with_capacity(results.len());
        for r in &results {
            let stem = r.class_id.map_or_else(|| "fv".to_string(), |c| c.to_string());
            let base = format!("{dir_rel}/{}/{stem}", r.neuron_id);
            let (image, masked, trace) = (
                format!("{base}.png"),
                format!("{base}_masked.png"),
                format!("{base}.trace.json"),
            );
            let role = format!("{}/{stem}", r.neuron_id);
            b.existing(&format!("{role}/image"), &image)?;
            b.existing(&format!("{role}/masked"), &masked)?;
            b.existing(&format!("{role}/trace"), &trace)?;
            let relevance = match (r.class_id, r.mask_degenerate) {
                (Some(c), false) => {
                    let rep = ctx.representative(rep_split, c)?;
                    Some(core_relevance(r, &rep, &ctx.handle)?.score)
                }
                _ => None,
            };
            entries.push(GalleryEntry {
                neuron_id: r.neuron_id,
                class_id: r.class_id,
                class_name: r.class_id.map(|c| ctx.handle.class_names()[c].clone()),
                activation: r.activation,
                class_logit: r.class_logit,
                clip_alignment: r.clip_alignment,
                core_relevance: relevance,
                mask_degenerate: r.mask_degenerate,
                image,
                masked_image: masked,
                trace,
            });
        }
        let index = GalleryIndex {
            key: key.clone(),
            request: request.clone(),
            representative_split: self.config.representative_split.clone(),
            entries,
        };
        b.json("index", &format!("{dir_rel}/index.json"), &index)?;
        b.stage.summary = json!({ "neurons": neurons, "images": index.entries.len() });
        let stage = b.finish(None)?;
        Ok(StageOutcome::of(run_id, &stage))
    }

    /// Every gallery of the run, oldest first.
    pub fn gallery(&self, run_id: &str) -> Result<Vec<GalleryIndex>> {
        let manifest = self.store.load(run_id)?;
        manifest
            .stages_of(StageKind::Gallery)
            .map(|s| {
                let rel = s
                    .artifact("index")
                    .ok_or_else(|| WorkbenchError::Artifact(format!("{run_id}: gallery index")))?;
                self.store.read_json(run_id, rel)
            })
            .collect()
    }

    fn mistakes(&self, run_id: &str) -> Result<MistakeSet> {
        let manifest = self.store.load(run_id)?;
        let stage = manifest
            .latest(StageKind::Mistakes)
            .ok_or_else(|| WorkbenchError::NoRanking(run_id.into()))?;
        self.store.read_json(run_id, stage.artifact("mistakes").unwrap_or("mistakes.json"))
    }

    /// Suggested `o` for `targets`, at the mean features of the run's
    /// mistake set (the class's training mean when there are no mistakes).
    pub fn suggest_o(&self, run_id: &str, targets: &[EditTarget]) -> Result<f64> {
        let manifest = self.store.load(run_id)?;
        let ctx = self.context(run_id)?;
        let split = ctx.splits.get(&manifest.request.mistake_split)?;
        let mean = match mean_of_mistakes(&ctx.handle, split, &self.mistakes(run_id)?)? {
            Some(m) => m,
            None => ctx
                .train_features()?
                .of_class(manifest.request.class_id)
                .mean_features()
                .ok_or(neurodebug::Error::EmptySplit)?,
        };
        Ok(suggest_o(ctx.handle.decision_layer(), &mean, targets)?)
    }

    /// Turn an edit request into a full plan.
    pub fn resolve_edit(&self, run_id: &str, request: &EditRequest) -> Result<EditPlan> {
        if let Some(plan) = &request.plan {
            return Ok(plan.clone());
        }
        if request.targets.is_empty() {
            return Err(WorkbenchError::InvalidRequest("an edit needs a plan or at least one target".into()));
        }
        let mut plan = match request.preset {
            EditPreset::Default => EditPlan::new(request.targets.clone()),
            EditPreset::Planted => EditPlan::planted(request.targets.clone()),
        };
        if let Some(m) = request.method {
            plan.method = m;
        }
        if let Some(l) = request.lambda3 {
            plan.lambda3 = l;
        }
        if let Some(e) = request.epochs {
            plan.epochs = e;
        }
        if let Some(s) = request.seed {
            plan.seed = s;
        }
        match (request.o, request.suggest_o) {
            (Some(_), true) => {
                return Err(WorkbenchError::InvalidRequest("give either o or suggest_o, not both".into()))
            }
            (Some(o), false) => plan.o = o,
            (None, true) => plan.o = self.suggest_o(run_id, &request.targets)?,
            (None, false) => {}
        }
        Ok(plan)
    }

    /// Check an edit request against the run's base layer and return its plan.
    pub fn check_edit(&self, run_id: &str, request: &EditRequest) -> Result<EditPlan> {
        let ranking = self.ranking(run_id)?;
        for t in request.plan.as_ref().map_or(&request.targets, |p| &p.targets) {
            if t.neuron_id >= ranking.report.feature_dim {
                return Err(WorkbenchError::UnknownNeuron {
                    neuron: t.neuron_id,
                    dim: ranking.report.feature_dim,
                });
            }
        }
        let plan = self.resolve_edit(run_id, request)?;
        plan.validate(self.context(run_id)?.handle.decision_layer())
            .map_err(|e| WorkbenchError::InvalidRequest(e.to_string()))?;
        Ok(plan)
    }

    pub fn edit_key(plan: &EditPlan) -> Result<String> {
        content_key(plan)
    }

    /// Edit the base decision layer under `plan` and record the result.
    pub fn edit(&self, run_id: &str, plan: &EditPlan) -> Result<StageOutcome> {
        let key = Self::edit_key(plan)?;
        if let Some(stage) = self.store.load(run_id)?.find_keyed(StageKind::Edit, &key) {
            return Ok(StageOutcome::of(run_id, stage));
        }
        let manifest = self.store.load(run_id)?;
        let request = &manifest.request;
        let base_ranking = self.ranking(run_id)?;
        let ctx = self.context(run_id)?;
        let mut edited = ctx.handle.clone();
        let outcome = edit_decision_layer(&mut edited, ctx.train_features()?, ctx.val_features()?, plan)?;

        let dir = format!("edits/{key}");
        let mut b = StageBuilder::new(&self.store, run_id, StageKind::Edit);
        b.stage.key = Some(key.clone());
        b.bytes("layer", &format!("{dir}/{LAYER_FILE}"), &layer_bytes(&outcome.edited_layer)?)?;
        b.json("outcome", &format!("{dir}/outcome.json"), &outcome)?;

        let mut metrics = BTreeMap::new();
        for split in metric_splits(request) {
            let p = predict_split(&edited, ctx.splits.get(&split)?, None)?;
            let m = MetricsReport::from_predictions(&p)?;
            b.json(&format!("{split}.predictions"), &format!("{dir}/metrics/{split}.predictions.json"), &p)?;
            b.json(&split, &format!("{dir}/metrics/{split}.json"), &m)?;
            metrics.insert(split, m);
        }

        // re-explain the same mistakes on the edited model
        let split = ctx.splits.get(&request.mistake_split)?;
        let mistakes = self.mistakes(run_id)?;
        let after_results = explain_mistakes(&edited, split, &mistakes, &request.omega)?;
        let after_ranking = rank_results(&after_results, request.top_k).ok().map(|(r, _)| r);
        if let Some(r) = &after_ranking {
            b.json("ranking", &format!("{dir}/ranking.json"), r)?;
        }

        let base_metrics: MetricsReport =
            self.store.read_json(run_id, &format!("metrics/base/{}.json", request.mistake_split))?;
        let targets: Vec<usize> = plan.targets.iter().map(|t| t.neuron_id).collect();
        let delta = compare_edits(
            &format!("edit {key}"),
            &EditSnapshot {
                metrics: base_metrics,
                ranking: Some(base_ranking.report),
            },
            &EditSnapshot {
                metrics: metrics[&request.mistake_split].clone(),
                ranking: after_ranking,
            },
            &targets,
            request.top_k,
        )?;
        b.json("delta", &format!("{dir}/delta.json"), &delta)?;
        b.stage.summary = json!({ "method": plan.method, "o": plan.o, "delta": delta.rows[0] });
        let stage = b.finish(None)?;
        Ok(StageOutcome::of(run_id, &stage))
    }

    pub fn metrics(&self, run_id: &str) -> Result<MetricsView> {
        let manifest = self.store.load(run_id)?;
        let mut base = BTreeMap::new();
        if let Some(stage) = manifest.find_keyed(StageKind::Metrics, "base") {
            for (role, rel) in &stage.artifacts {
                if !role.ends_with(".predictions") {
                    base.insert(role.clone(), self.store.read_json(run_id, rel)?);
                }
            }
        }
        let mut edits = Vec::new();
        for stage in manifest.stages_of(StageKind::Edit) {
            let key = stage.key.clone().unwrap_or_default();
            let outcome: Value = self.store.read_json(run_id, stage.artifact("outcome").unwrap_or_default())?;
            let plan: EditPlan = serde_json::from_value(outcome["plan"].clone())?;
            let mut metrics = BTreeMap::new();
            for split in metric_splits(&manifest.request) {
                if let Some(rel) = stage.artifact(&split) {
                    metrics.insert(split, self.store.read_json(run_id, rel)?);
                }
            }
            let delta = self.store.read_json(run_id, stage.artifact("delta").unwrap_or_default())?;
            edits.push(EditSummary {
                key,
                plan,
                metrics,
                delta,
            });
        }
        Ok(MetricsView { base, edits })
    }

    /// Stored predictions of the base model on `split`.
    pub fn base_predictions(&self, run_id: &str, split: &str) -> Result<Predictions> {
        self.store.read_json(run_id, &format!("metrics/base/{split}.predictions.json"))
    }
}
