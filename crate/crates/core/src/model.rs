//! Classifier access split into a frozen feature extractor and a dense
//! decision layer.
//!
//! A "neuron" is one post-pooling penultimate unit; its spatial map is the
//! matching pre-pooling channel of the extractor's last stage.

use std::any::Any;
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::io::TensorFile;
use crate::nn::{Architecture, Backbone, Conv2d, LayerSpec, MaxPool2d, Stage};
use crate::tensor::{Image, Tensor3};

/// Expected geometry and per-channel normalisation of input images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputSpec {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl InputSpec {
    pub fn unnormalized(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            channels: 3,
            mean: vec![0.0; 3],
            std: vec![1.0; 3],
        }
    }

    pub fn imagenet(size: usize) -> Self {
        Self {
            height: size,
            width: size,
            channels: 3,
            mean: vec![0.485, 0.456, 0.406],
            std: vec![0.229, 0.224, 0.225],
        }
    }

    pub fn check(&self, image: &Image) -> Result<()> {
        if image.channels != self.channels || image.height != self.height || image.width != self.width {
            return Err(Error::shape(
                format!("{}x{}x{}", self.channels, self.height, self.width),
                image.shape_string(),
            ));
        }
        Ok(())
    }

    pub fn normalize(&self, image: &Image) -> Tensor3 {
        let mut out = image.clone();
        for c in 0..out.channels {
            let (m, s) = (self.mean[c], self.std[c]);
            out.plane_mut(c).iter_mut().for_each(|v| *v = (*v - m) / s);
        }
        out
    }
}

/// Post-pooling penultimate activations of one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FeatureVector(pub Vec<f64>);

impl FeatureVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn mean_of(vectors: &[FeatureVector]) -> Option<FeatureVector> {
        let first = vectors.first()?;
        let mut acc = vec![0.0; first.len()];
        for v in vectors {
            acc.iter_mut().zip(&v.0).for_each(|(a, b)| *a += b);
        }
        let n = vectors.len() as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        Some(FeatureVector(acc))
    }
}

impl std::ops::Index<usize> for FeatureVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

/// Dense decision layer: `logit_i = sum_k coefficients[i][k] * f[k] + biases[i]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionLayer {
    pub num_classes: usize,
    pub feature_dim: usize,
    /// Row-major `num_classes x feature_dim`.
    pub coefficients: Vec<f64>,
    pub biases: Vec<f64>,
}

impl DecisionLayer {
    pub fn new(num_classes: usize, feature_dim: usize, coefficients: Vec<f64>, biases: Vec<f64>) -> Result<Self> {
        if coefficients.len() != num_classes * feature_dim || biases.len() != num_classes {
            return Err(Error::shape(
                format!("{num_classes}x{feature_dim} coefficients and {num_classes} biases"),
                format!("{} coefficients and {} biases", coefficients.len(), biases.len()),
            ));
        }
        Ok(Self {
            num_classes,
            feature_dim,
            coefficients,
            biases,
        })
    }

    pub fn zeros(num_classes: usize, feature_dim: usize) -> Self {
        Self {
            num_classes,
            feature_dim,
            coefficients: vec![0.0; num_classes * feature_dim],
            biases: vec![0.0; num_classes],
        }
    }

    #[inline]
    pub fn coef(&self, class: usize, neuron: usize) -> f64 {
        self.coefficients[class * self.feature_dim + neuron]
    }

    #[inline]
    pub fn coef_mut(&mut self, class: usize, neuron: usize) -> &mut f64 {
        &mut self.coefficients[class * self.feature_dim + neuron]
    }

    pub fn row(&self, class: usize) -> &[f64] {
        &self.coefficients[class * self.feature_dim..(class + 1) * self.feature_dim]
    }

    pub fn column(&self, neuron: usize) -> Vec<f64> {
        (0..self.num_classes).map(|i| self.coef(i, neuron)).collect()
    }

    pub fn logits(&self, features: &[f64]) -> Vec<f64> {
        (0..self.num_classes)
            .map(|i| {
                self.row(i)
                    .iter()
                    .zip(features)
                    .map(|(b, f)| b * f)
                    .sum::<f64>()
                    + self.biases[i]
            })
            .collect()
    }

    pub fn check_features(&self, features: &[f64]) -> Result<()> {
        if features.len() != self.feature_dim {
            return Err(Error::shape(format!("{} features", self.feature_dim), features.len()));
        }
        Ok(())
    }

    pub fn check_class(&self, class: usize) -> Result<()> {
        if class >= self.num_classes {
            return Err(Error::ClassOutOfRange {
                class,
                num_classes: self.num_classes,
            });
        }
        Ok(())
    }

    pub fn check_neuron(&self, neuron: usize) -> Result<()> {
        if neuron >= self.feature_dim {
            return Err(Error::NeuronOutOfRange {
                neuron,
                dim: self.feature_dim,
            });
        }
        Ok(())
    }

    pub fn probabilities(&self, features: &[f64]) -> Result<Vec<f64>> {
        self.check_features(features)?;
        Ok(softmax(&self.logits(features)))
    }
}

pub fn log_sum_exp(values: &[f64]) -> f64 {
    let m = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + values.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(logits);
    logits.iter().map(|l| (l - lse).exp()).collect()
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Pre-pooling response of one neuron.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpatialActivationMap {
    pub neuron_id: usize,
    pub height: usize,
    pub width: usize,
    pub grid: Vec<f64>,
}

impl SpatialActivationMap {
    pub fn pooled(&self) -> f64 {
        self.grid.iter().sum::<f64>() / self.grid.len() as f64
    }

    pub fn max(&self) -> f64 {
        self.grid.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.grid[y * self.width + x]
    }
}

/// Forward state kept for one backward pass.
pub struct FeatureTrace {
    pub features: FeatureVector,
    pub maps: Tensor3,
    tape: Box<dyn Any + Send + Sync>,
}

impl FeatureTrace {
    pub fn new(features: FeatureVector, maps: Tensor3, tape: Box<dyn Any + Send + Sync>) -> Self {
        Self { features, maps, tape }
    }

    pub fn tape<T: 'static>(&self) -> Option<&T> {
        self.tape.downcast_ref()
    }
}

/// Image to feature-vector map with a vector-Jacobian product back to pixels.
///
/// Implementations are read-only in evaluation mode and must be safe to call
/// concurrently.
pub trait FeatureExtractor: Send + Sync {
    fn input_spec(&self) -> &InputSpec;

    fn feature_dim(&self) -> usize;

    /// `feature_dim x H' x W'` pre-pooling maps; their spatial means are the features.
    fn spatial_maps(&self, image: &Image) -> Result<Tensor3>;

    fn features(&self, image: &Image) -> Result<FeatureVector> {
        Ok(FeatureVector(self.spatial_maps(image)?.spatial_mean()))
    }

    fn trace(&self, image: &Image) -> Result<FeatureTrace>;

    /// Gradient with respect to the (unnormalised) input pixels of
    /// `sum_k upstream[k] * features[k]`.
    fn backward(&self, trace: &FeatureTrace, upstream: &[f64]) -> Result<Image>;

    /// Stable digest of every parameter, for frozen-weights checks.
    fn parameter_digest(&self) -> String;

    /// Write parameters into `file`, if this extractor is persistable.
    fn export(&self, _file: &mut TensorFile) -> Result<()> {
        Err(Error::UnsupportedArchitecture(
            "extractor cannot be exported".into(),
        ))
    }

    fn architecture_name(&self) -> String {
        "custom".into()
    }
}

/// Convolutional backbone with input normalisation and global average pooling.
#[derive(Debug, Clone)]
pub struct CnnExtractor {
    pub backbone: Backbone,
    pub input_spec: InputSpec,
}

impl CnnExtractor {
    pub fn new(backbone: Backbone, input_spec: InputSpec) -> Self {
        Self { backbone, input_spec }
    }
}

impl FeatureExtractor for CnnExtractor {
    fn input_spec(&self) -> &InputSpec {
        &self.input_spec
    }

    fn feature_dim(&self) -> usize {
        self.backbone.out_channels()
    }

    fn spatial_maps(&self, image: &Image) -> Result<Tensor3> {
        self.input_spec.check(image)?;
        Ok(self.backbone.forward(self.input_spec.normalize(image)))
    }

    fn trace(&self, image: &Image) -> Result<FeatureTrace> {
        self.input_spec.check(image)?;
        let (maps, tape) = self.backbone.forward_recorded(self.input_spec.normalize(image));
        Ok(FeatureTrace::new(
            FeatureVector(maps.spatial_mean()),
            maps,
            Box::new(tape),
        ))
    }

    fn backward(&self, trace: &FeatureTrace, upstream: &[f64]) -> Result<Image> {
        if upstream.len() != self.feature_dim() {
            return Err(Error::shape(self.feature_dim(), upstream.len()));
        }
        let tape = trace
            .tape::<crate::nn::ForwardTape>()
            .ok_or_else(|| Error::InvalidConfig("trace was produced by another extractor".into()))?;
        let maps = &trace.maps;
        let n = (maps.height * maps.width) as f64;
        let mut g = Tensor3::zeros(maps.channels, maps.height, maps.width);
        for c in 0..maps.channels {
            let v = upstream[c] / n;
            g.plane_mut(c).iter_mut().for_each(|x| *x = v);
        }
        let mut grad = self.backbone.backward(tape, g);
        for c in 0..grad.channels {
            let s = self.input_spec.std[c];
            grad.plane_mut(c).iter_mut().for_each(|x| *x /= s);
        }
        Ok(grad)
    }

    fn parameter_digest(&self) -> String {
        let mut hasher = Sha256::new();
        for (name, shape, values) in self.backbone.named_parameters() {
            hasher.update(name.as_bytes());
            for s in shape {
                hasher.update((s as u64).to_le_bytes());
            }
            for v in values {
                hasher.update(v.to_le_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }

    fn export(&self, file: &mut TensorFile) -> Result<()> {
        self.backbone.export(file);
        Ok(())
    }

    fn architecture_name(&self) -> String {
        self.backbone.architecture.name().into()
    }
}

/// How to obtain a classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum ModelDescriptor {
    /// A registry architecture: seeded weights, pretrained on a shape task
    /// for `planted-cnn`.
    Registry {
        name: String,
        num_classes: usize,
        #[serde(default)]
        seed: u64,
        #[serde(default)]
        input_size: Option<usize>,
        #[serde(default)]
        class_names: Option<Vec<String>>,
    },
    /// A safetensors checkpoint, optionally with a separately stored decision layer.
    File {
        path: PathBuf,
        #[serde(default)]
        decision_layer: Option<PathBuf>,
    },
}

pub const REGISTRY: &[&str] = &["toy-cnn", "planted-cnn", "resnet18", "resnet50"];

/// Classifier = feature extractor followed by a dense decision layer.
#[derive(Clone)]
pub struct ClassifierHandle {
    extractor: Arc<dyn FeatureExtractor>,
    decision: DecisionLayer,
    class_names: Vec<String>,
}

impl fmt::Debug for ClassifierHandle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ClassifierHandle")
            .field("architecture", &self.extractor.architecture_name())
            .field("feature_dim", &self.feature_dim())
            .field("num_classes", &self.num_classes())
            .finish()
    }
}

fn default_class_names(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("class_{i}")).collect()
}

impl ClassifierHandle {
    /// Escape hatch for extractors outside the registry.
    pub fn from_parts(
        extractor: Arc<dyn FeatureExtractor>,
        decision: DecisionLayer,
        class_names: Vec<String>,
    ) -> Result<Self> {
        if extractor.feature_dim() != decision.feature_dim {
            return Err(Error::UnsupportedArchitecture(format!(
                "extractor emits {} features but the decision layer expects {}",
                extractor.feature_dim(),
                decision.feature_dim
            )));
        }
        if class_names.len() != decision.num_classes {
            return Err(Error::shape(
                format!("{} class names", decision.num_classes),
                class_names.len(),
            ));
        }
        Ok(Self {
            extractor,
            decision,
            class_names,
        })
    }

    pub fn extractor(&self) -> &Arc<dyn FeatureExtractor> {
        &self.extractor
    }

    pub fn input_spec(&self) -> &InputSpec {
        self.extractor.input_spec()
    }

    pub fn feature_dim(&self) -> usize {
        self.extractor.feature_dim()
    }

    pub fn num_classes(&self) -> usize {
        self.decision.num_classes
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn decision_layer(&self) -> &DecisionLayer {
        &self.decision
    }

    /// Owned copy; mutating it leaves the handle untouched.
    pub fn decision_weights(&self) -> DecisionLayer {
        self.decision.clone()
    }

    pub fn set_decision_layer(&mut self, layer: DecisionLayer) -> Result<()> {
        if layer.feature_dim != self.feature_dim() || layer.num_classes != self.num_classes() {
            return Err(Error::shape(
                format!("{}x{}", self.num_classes(), self.feature_dim()),
                format!("{}x{}", layer.num_classes, layer.feature_dim),
            ));
        }
        self.decision = layer;
        Ok(())
    }

    pub fn extract_features(&self, images: &[Image]) -> Result<Vec<FeatureVector>> {
        images.par_iter().map(|img| self.extractor.features(img)).collect()
    }

    pub fn neuron_spatial_map(&self, image: &Image, neuron_id: usize) -> Result<SpatialActivationMap> {
        if neuron_id >= self.feature_dim() {
            return Err(Error::NeuronOutOfRange {
                neuron: neuron_id,
                dim: self.feature_dim(),
            });
        }
        let maps = self.extractor.spatial_maps(image)?;
        Ok(SpatialActivationMap {
            neuron_id,
            height: maps.height,
            width: maps.width,
            grid: maps.plane(neuron_id).to_vec(),
        })
    }

    pub fn predict(&self, features: &FeatureVector) -> Result<Vec<f64>> {
        self.decision.probabilities(features.as_slice())
    }

    /// End-to-end class probabilities for each image.
    pub fn predict_images(&self, images: &[Image]) -> Result<Vec<Vec<f64>>> {
        images
            .par_iter()
            .map(|img| {
                let f = self.extractor.features(img)?;
                self.decision.probabilities(f.as_slice())
            })
            .collect()
    }

    pub fn logits(&self, features: &FeatureVector) -> Result<Vec<f64>> {
        self.decision.check_features(features.as_slice())?;
        Ok(self.decision.logits(features.as_slice()))
    }

    /// Full checkpoint: extractor parameters plus `fc.weight` / `fc.bias`.
    pub fn save(&self, path: &Path, architecture: &Architecture) -> Result<()> {
        let mut file = TensorFile::default();
        self.extractor.export(&mut file)?;
        write_decision_tensors(&mut file, &self.decision);
        file.metadata
            .insert("architecture".into(), serde_json::to_string(architecture)?);
        file.metadata
            .insert("input_spec".into(), serde_json::to_string(self.input_spec())?);
        file.metadata
            .insert("class_names".into(), serde_json::to_string(&self.class_names)?);
        file.write(path)
    }
}

fn write_decision_tensors(file: &mut TensorFile, layer: &DecisionLayer) {
    file.insert(
        "fc.weight",
        vec![layer.num_classes, layer.feature_dim],
        layer.coefficients.clone(),
    );
    file.insert("fc.bias", vec![layer.num_classes], layer.biases.clone());
}

/// Decision layer alone, as written next to an original checkpoint.
pub fn save_decision_layer(path: &Path, layer: &DecisionLayer) -> Result<()> {
    let mut file = TensorFile::default();
    write_decision_tensors(&mut file, layer);
    file.write(path)
}

pub fn load_decision_layer(path: &Path) -> Result<DecisionLayer> {
    let mut file = TensorFile::read(path)?;
    take_decision_layer(path, &mut file)
}

fn take_decision_layer(path: &Path, file: &mut TensorFile) -> Result<DecisionLayer> {
    let (w_name, b_name) = ["fc", "classifier", "head"]
        .iter()
        .map(|p| (format!("{p}.weight"), format!("{p}.bias")))
        .find(|(w, _)| file.tensors.contains_key(w))
        .ok_or_else(|| Error::UnsupportedArchitecture(format!("{}: no dense final layer found", path.display())))?;
    let shape = file.tensors[&w_name].shape.clone();
    if shape.len() != 2 {
        return Err(Error::UnsupportedArchitecture(format!(
            "{}: final layer {w_name} has shape {shape:?}, not a dense matrix",
            path.display()
        )));
    }
    let coefficients = file.take(path, &w_name, &shape)?;
    let biases = if file.tensors.contains_key(&b_name) {
        file.take(path, &b_name, &[shape[0]])?
    } else {
        vec![0.0; shape[0]]
    };
    DecisionLayer::new(shape[0], shape[1], coefficients, biases)
}

/// Infer a residual architecture from torchvision parameter names.
fn infer_architecture(file: &TensorFile) -> Option<Architecture> {
    if file.tensors.contains_key("layer4.2.conv3.weight") {
        Some(Architecture::Resnet50)
    } else if file.tensors.contains_key("layer4.1.conv2.weight") {
        Some(Architecture::Resnet18)
    } else {
        None
    }
}

/// The planted-scenario backbone: four convolutions with two pooling stages
/// on 64x64 RGB, 32 neurons on an 8x8 grid.
pub fn planted_cnn_architecture() -> Architecture {
    let pool = || LayerSpec::MaxPool(MaxPool2d { kernel: 2, stride: 2, padding: 0 });
    Architecture::Sequential {
        layers: vec![
            LayerSpec::Conv { in_channels: 3, out_channels: 16, kernel: 5, stride: 2, padding: 2, bias: true },
            LayerSpec::Relu,
            LayerSpec::Conv { in_channels: 16, out_channels: 32, kernel: 3, stride: 1, padding: 1, bias: true },
            LayerSpec::Relu,
            pool(),
            LayerSpec::Conv { in_channels: 32, out_channels: 32, kernel: 3, stride: 1, padding: 1, bias: true },
            LayerSpec::Relu,
            pool(),
            LayerSpec::Conv { in_channels: 32, out_channels: 32, kernel: 3, stride: 1, padding: 1, bias: true },
            LayerSpec::Relu,
        ],
    }
}

/// Two valid 3x3 convolutions (3 -> 8 -> 8) on 16x16 input.
pub fn toy_cnn_architecture() -> Architecture {
    Architecture::Sequential {
        layers: vec![
            LayerSpec::Conv { in_channels: 3, out_channels: 8, kernel: 3, stride: 1, padding: 0, bias: true },
            LayerSpec::Relu,
            LayerSpec::Conv { in_channels: 8, out_channels: 8, kernel: 3, stride: 1, padding: 0, bias: true },
            LayerSpec::Relu,
        ],
    }
}

/// Closed-form weights for the toy fixture, so tests can reason about them.
pub fn toy_fixture_weights(backbone: &mut Backbone) {
    let mut layer = 0usize;
    backbone.for_each_stage_mut(&mut |s| {
        if let Stage::Conv(c) = s {
            fill_fixture_conv(c, layer);
            layer += 1;
        }
    });
}

fn fill_fixture_conv(c: &mut Conv2d, layer: usize) {
    // zero-sum filters respond to contrast rather than brightness; the
    // positive bias keeps every unit alive on flat grey input
    let per_out = c.weight.len() / c.out_channels;
    for (o, filter) in c.weight.chunks_mut(per_out).enumerate() {
        for (j, w) in filter.iter_mut().enumerate() {
            *w = ((j as f64 + 1.0) * (0.37 + 0.11 * o as f64) + layer as f64).sin() * 0.4;
        }
        let mean = filter.iter().sum::<f64>() / per_out as f64;
        filter.iter_mut().for_each(|w| *w -= mean);
    }
    if let Some(b) = &mut c.bias {
        for (o, v) in b.iter_mut().enumerate() {
            *v = 0.1 + 0.02 * o as f64;
        }
    }
}

/// The decision layer paired with the toy fixture.
pub fn toy_fixture_decision(num_classes: usize, feature_dim: usize) -> DecisionLayer {
    let coefficients = (0..num_classes * feature_dim)
        .map(|j| ((j as f64) * 0.61).cos() * 0.5)
        .collect();
    let biases = (0..num_classes).map(|i| 0.01 * i as f64).collect();
    DecisionLayer {
        num_classes,
        feature_dim,
        coefficients,
        biases,
    }
}

fn registry_model(
    name: &str,
    num_classes: usize,
    seed: u64,
    input_size: Option<usize>,
) -> Result<(Architecture, Backbone, InputSpec, DecisionLayer)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (arch, spec) = match name {
        "toy-cnn" => (
            toy_cnn_architecture(),
            InputSpec::unnormalized(input_size.unwrap_or(16), input_size.unwrap_or(16)),
        ),
        "planted-cnn" => {
            let s = input_size.unwrap_or(64);
            let mut spec = InputSpec::unnormalized(s, s);
            spec.mean = vec![0.5; 3];
            spec.std = vec![0.25; 3];
            (planted_cnn_architecture(), spec)
        }
        "resnet18" => (Architecture::Resnet18, InputSpec::imagenet(input_size.unwrap_or(224))),
        "resnet50" => (Architecture::Resnet50, InputSpec::imagenet(input_size.unwrap_or(224))),
        other => return Err(Error::UnsupportedArchitecture(format!("unknown registry model {other:?}"))),
    };
    let mut backbone = arch.build(&mut rng);
    let d = backbone.out_channels();
    if name == "planted-cnn" {
        let config = crate::pretrain::PretextConfig {
            image_size: spec.height,
            seed,
            ..Default::default()
        };
        crate::pretrain::pretrain_cached(&mut backbone, &spec, &config)?;
    }
    let decision = if name == "toy-cnn" {
        toy_fixture_weights(&mut backbone);
        toy_fixture_decision(num_classes, d)
    } else {
        let normal = Normal::new(0.0, (1.0 / d as f64).sqrt()).expect("valid std");
        let coefficients = (0..num_classes * d).map(|_| normal.sample(&mut rng)).collect();
        DecisionLayer::new(num_classes, d, coefficients, vec![0.0; num_classes])?
    };
    Ok((arch, backbone, spec, decision))
}

/// Loaded classifier together with the architecture needed to re-save it.
#[derive(Debug, Clone)]
pub struct LoadedModel {
    pub handle: ClassifierHandle,
    pub architecture: Architecture,
}

/// Resolve a descriptor into a classifier handle and verify that the
/// end-to-end prediction equals softmax of the decision layer applied to the
/// extracted features on a probe image.
pub fn split_classifier(descriptor: &ModelDescriptor) -> Result<LoadedModel> {
    let (architecture, backbone, spec, decision, names) = match descriptor {
        ModelDescriptor::Registry {
            name,
            num_classes,
            seed,
            input_size,
            class_names,
        } => {
            if *num_classes == 0 {
                return Err(Error::InvalidConfig("num_classes must be positive".into()));
            }
            let (arch, backbone, spec, decision) = registry_model(name, *num_classes, *seed, *input_size)?;
            let names = class_names.clone().unwrap_or_else(|| default_class_names(*num_classes));
            (arch, backbone, spec, decision, names)
        }
        ModelDescriptor::File { path, decision_layer } => {
            let mut file = TensorFile::read(path)?;
            let architecture = match file.metadata.get("architecture") {
                Some(json) => serde_json::from_str(json).map_err(|e| Error::WeightLoad {
                    path: path.clone(),
                    reason: format!("bad architecture metadata: {e}"),
                })?,
                None => infer_architecture(&file).ok_or_else(|| {
                    Error::UnsupportedArchitecture(format!("{}: unrecognised parameter layout", path.display()))
                })?,
            };
            let mut decision = take_decision_layer(path, &mut file)?;
            if let Some(overlay) = decision_layer {
                decision = load_decision_layer(overlay)?;
            }
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let mut backbone = architecture.build(&mut rng);
            backbone.import(path, &mut file)?;
            if backbone.out_channels() != decision.feature_dim {
                return Err(Error::UnsupportedArchitecture(format!(
                    "{}: decision layer expects {} features, backbone emits {}",
                    path.display(),
                    decision.feature_dim,
                    backbone.out_channels()
                )));
            }
            let spec = match file.metadata.get("input_spec") {
                Some(json) => serde_json::from_str(json)?,
                None => InputSpec::imagenet(224),
            };
            let names = match file.metadata.get("class_names") {
                Some(json) => serde_json::from_str(json)?,
                None => default_class_names(decision.num_classes),
            };
            (architecture, backbone, spec, decision, names)
        }
    };
    let handle = ClassifierHandle::from_parts(Arc::new(CnnExtractor::new(backbone, spec)), decision, names)?;
    verify_composition(&handle)?;
    Ok(LoadedModel { handle, architecture })
}

fn verify_composition(handle: &ClassifierHandle) -> Result<()> {
    let spec = handle.input_spec();
    let probe = Tensor3::filled(spec.channels, spec.height, spec.width, 0.5);
    let trace = handle.extractor().trace(&probe)?;
    let via_trace = softmax(&handle.decision.logits(trace.features.as_slice()));
    let via_features = handle.predict(&handle.extractor().features(&probe)?)?;
    let max_diff = via_trace
        .iter()
        .zip(&via_features)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    if !(max_diff <= 1e-9) || trace.features.0.iter().any(|v| !v.is_finite()) {
        return Err(Error::UnsupportedArchitecture(format!(
            "composition check failed (max diff {max_diff})"
        )));
    }
    Ok(())
}
