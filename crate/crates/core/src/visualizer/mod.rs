//! Neuron visualisation by gradient ascent on pixels.
//!
//! [`generate_fv`] maximises a neuron's pooled activation. [`generate_illusion`]
//! additionally rewards the class logit and multiplies the drive by the
//! image's cosine similarity to a class prompt, so the picture shows what the
//! neuron responds to *within* that class:
//!
//! `L = -(cos(E_I(x), t_c) + eps) * (a_n(x) + gamma * l_c(x))`
//!
//! Every step sees a freshly augmented copy of the image.

pub mod augment;
pub mod encoder;
pub mod mask;

use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageio::write_png;
use crate::model::{ClassifierHandle, DecisionLayer, FeatureVector, SpatialActivationMap};
use crate::optim::{Adam, AdamConfig, LrSchedule};
use crate::scenarios::Dataset;
use crate::tensor::Image;

pub use augment::{augment, AugmentConfig, AugmentParams, Augmentation};
pub use encoder::{
    build_prompt_embedding, cosine, encoder_pair, EncoderPair, ImageEncoder, StubEncoder, TextEncoder,
    DEFAULT_TEMPLATES, STUB_ENCODER,
};
pub use mask::{apply_mask, MaskedImage, DEFAULT_MASK_THRESHOLD};

pub const DEFAULT_STEPS: usize = 400;
pub const DEFAULT_LEARNING_RATE: f64 = 9e-3;
pub const DEFAULT_GAMMA: f64 = 0.7;
pub const DEFAULT_EPSILON: f64 = 0.1;
/// Classes per neuron in gallery mode.
pub const DEFAULT_GALLERY_CLASSES: usize = 25;

fn default_templates() -> Vec<String> {
    DEFAULT_TEMPLATES.iter().map(|s| s.to_string()).collect()
}

/// Prompt term used by an activation-only run that still wants alignment
/// weighting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptAlignment {
    pub encoder: String,
    pub class_name: String,
    #[serde(default = "default_templates")]
    pub templates: Vec<String>,
    pub epsilon: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FvSpec {
    pub neuron_id: usize,
    pub steps: usize,
    pub learning_rate: f64,
    #[serde(default)]
    pub weight_decay: f64,
    pub seed: u64,
    #[serde(default)]
    pub augment: AugmentConfig,
    #[serde(default = "default_mask_threshold")]
    pub mask_threshold: f64,
    #[serde(default)]
    pub alignment: Option<PromptAlignment>,
}

fn default_mask_threshold() -> f64 {
    DEFAULT_MASK_THRESHOLD
}

impl FvSpec {
    pub fn new(neuron_id: usize) -> Self {
        Self {
            neuron_id,
            steps: DEFAULT_STEPS,
            learning_rate: DEFAULT_LEARNING_RATE,
            weight_decay: 0.0,
            seed: 0,
            augment: AugmentConfig::default(),
            mask_threshold: DEFAULT_MASK_THRESHOLD,
            alignment: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IllusionSpec {
    pub neuron_id: usize,
    /// `None` picks the class with the largest coefficient on the neuron.
    #[serde(default)]
    pub class_id: Option<usize>,
    pub gamma: f64,
    pub epsilon: f64,
    pub steps: usize,
    pub learning_rate: f64,
    #[serde(default)]
    pub weight_decay: f64,
    pub seed: u64,
    pub encoder: String,
    #[serde(default = "default_templates")]
    pub prompt_templates: Vec<String>,
    #[serde(default)]
    pub augment: AugmentConfig,
    #[serde(default = "default_mask_threshold")]
    pub mask_threshold: f64,
}

impl IllusionSpec {
    pub fn new(neuron_id: usize, class_id: Option<usize>) -> Self {
        Self {
            neuron_id,
            class_id,
            gamma: DEFAULT_GAMMA,
            epsilon: DEFAULT_EPSILON,
            steps: DEFAULT_STEPS,
            learning_rate: DEFAULT_LEARNING_RATE,
            weight_decay: 0.0,
            seed: 0,
            encoder: STUB_ENCODER.into(),
            prompt_templates: default_templates(),
            augment: AugmentConfig::default(),
            mask_threshold: DEFAULT_MASK_THRESHOLD,
        }
    }

    pub fn validate(&self, handle: &ClassifierHandle) -> Result<()> {
        handle.decision_layer().check_neuron(self.neuron_id)?;
        if let Some(c) = self.class_id {
            handle.decision_layer().check_class(c)?;
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::InvalidConfig(format!("gamma must lie in [0, 1], got {}", self.gamma)));
        }
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::InvalidConfig(format!("epsilon must be non-negative, got {}", self.epsilon)));
        }
        if self.steps == 0 {
            return Err(Error::InvalidConfig("illusion needs at least one step".into()));
        }
        check_rate(self.learning_rate)
    }
}

fn check_rate(lr: f64) -> Result<()> {
    if lr > 0.0 && lr.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!("learning rate must be positive, got {lr}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub loss: f64,
    pub activation: f64,
    pub class_logit: Option<f64>,
    pub alignment: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Recipe {
    Fv(FvSpec),
    Illusion(IllusionSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IllusionResult {
    pub neuron_id: usize,
    pub class_id: Option<usize>,
    pub image: Image,
    pub masked_image: Image,
    pub mask_degenerate: bool,
    /// Measured on the final, unaugmented image.
    pub activation: f64,
    pub class_logit: Option<f64>,
    pub clip_alignment: Option<f64>,
    pub trace: Vec<TraceStep>,
    pub spatial_map: SpatialActivationMap,
    pub recipe: Recipe,
}

/// Cosine weighting by a prompt embedding.
#[derive(Clone)]
pub struct Alignment {
    pub encoder: Arc<dyn ImageEncoder>,
    pub text: Vec<f64>,
    pub epsilon: f64,
}

/// The quantity a visualisation run minimises.
#[derive(Clone)]
pub struct Objective {
    pub neuron_id: usize,
    /// Class and its weight `gamma`.
    pub class_term: Option<(usize, f64)>,
    pub alignment: Option<Alignment>,
}

/// Loss value, its parts and the gradient with respect to the pixels.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub step: TraceStep,
    pub grad: Image,
}

impl Objective {
    pub fn evaluate(&self, handle: &ClassifierHandle, image: &Image) -> Result<Evaluation> {
        let extractor = handle.extractor();
        let trace = extractor.trace(image)?;
        let f = trace.features.as_slice();
        let layer = handle.decision_layer();
        let activation = f[self.neuron_id];
        let mut drive = activation;
        let mut feature_grad = vec![0.0; f.len()];
        feature_grad[self.neuron_id] = 1.0;
        let mut class_logit = None;
        if let Some((c, gamma)) = self.class_term {
            let logit = layer.logits(f)[c];
            drive += gamma * logit;
            for (g, b) in feature_grad.iter_mut().zip(layer.row(c)) {
                *g += gamma * b;
            }
            class_logit = Some(logit);
        }
        let (loss, weight, alignment) = match &self.alignment {
            Some(a) => {
                let emb = a.encoder.embed(image)?;
                let cos = cosine(&emb, &a.text);
                (-(cos + a.epsilon) * drive, cos + a.epsilon, Some((a, emb, cos)))
            }
            None => (-drive, 1.0, None),
        };
        feature_grad.iter_mut().for_each(|g| *g *= -weight);
        let mut grad = extractor.backward(&trace, &feature_grad)?;
        let mut cos_value = None;
        if let Some((a, emb, cos)) = alignment {
            let upstream: Vec<f64> = encoder::cosine_grad(&emb, &a.text).iter().map(|g| -drive * g).collect();
            let g = a.encoder.backward(image, &upstream)?;
            for (x, y) in grad.data.iter_mut().zip(&g.data) {
                *x += y;
            }
            cos_value = Some(cos);
        }
        Ok(Evaluation {
            step: TraceStep {
                loss,
                activation,
                class_logit,
                alignment: cos_value,
            },
            grad,
        })
    }
}

/// Starting image: N(0.5, 0.1) per pixel, clamped to `[0, 1]`.
pub fn noise_image(handle: &ClassifierHandle, rng: &mut ChaCha8Rng) -> Image {
    let spec = handle.input_spec();
    let normal = Normal::new(0.5, 0.1).expect("valid std");
    let mut img = Image::zeros(spec.channels, spec.height, spec.width);
    img.data.iter_mut().for_each(|v| *v = normal.sample(rng));
    img.clamp_unit();
    img
}

struct RunSettings {
    steps: usize,
    learning_rate: f64,
    weight_decay: f64,
    seed: u64,
    augment: AugmentConfig,
}

fn optimize(handle: &ClassifierHandle, objective: &Objective, run: &RunSettings) -> Result<(Image, Vec<TraceStep>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(run.seed);
    let mut image = noise_image(handle, &mut rng);
    let mut adam = Adam::new(AdamConfig::adamw(run.weight_decay), image.data.len());
    let schedule = LrSchedule::Cosine {
        lr: run.learning_rate,
        min_lr: 0.0,
    };
    let mut trace = Vec::with_capacity(run.steps);
    for step in 0..run.steps {
        let op = Augmentation::new(image.height, image.width, &run.augment.sample(&mut rng));
        let eval = objective.evaluate(handle, &op.apply(&image))?;
        if !eval.step.loss.is_finite() || !eval.grad.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        let grad = op.adjoint(&eval.grad);
        adam.step(&mut image.data, &grad.data, schedule.at(step, run.steps));
        image.clamp_unit();
        trace.push(eval.step);
    }
    Ok((image, trace))
}

fn prompt_alignment(encoder_id: &str, class_name: &str, templates: &[String], epsilon: f64) -> Result<Alignment> {
    let pair = encoder_pair(encoder_id)?;
    Ok(Alignment {
        text: build_prompt_embedding(pair.text.as_ref(), class_name, templates)?,
        encoder: pair.image,
        epsilon,
    })
}

fn finish(
    handle: &ClassifierHandle,
    objective: &Objective,
    image: Image,
    trace: Vec<TraceStep>,
    mask_threshold: f64,
    recipe: Recipe,
) -> Result<IllusionResult> {
    let final_eval = objective.evaluate(handle, &image)?;
    let spatial_map = handle.neuron_spatial_map(&image, objective.neuron_id)?;
    let masked = apply_mask(&image, &spatial_map, mask_threshold)?;
    Ok(IllusionResult {
        neuron_id: objective.neuron_id,
        class_id: objective.class_term.map(|(c, _)| c),
        image,
        masked_image: masked.image,
        mask_degenerate: masked.degenerate,
        activation: final_eval.step.activation,
        class_logit: final_eval.step.class_logit,
        clip_alignment: final_eval.step.alignment,
        trace,
        spatial_map,
        recipe,
    })
}

/// Maximise the neuron's pooled activation alone (or weighted by prompt
/// alignment when `spec.alignment` is set).
pub fn generate_fv(handle: &ClassifierHandle, spec: &FvSpec) -> Result<IllusionResult> {
    handle.decision_layer().check_neuron(spec.neuron_id)?;
    check_rate(spec.learning_rate)?;
    let alignment = spec
        .alignment
        .as_ref()
        .map(|a| prompt_alignment(&a.encoder, &a.class_name, &a.templates, a.epsilon))
        .transpose()?;
    let objective = Objective {
        neuron_id: spec.neuron_id,
        class_term: None,
        alignment,
    };
    let run = RunSettings {
        steps: spec.steps,
        learning_rate: spec.learning_rate,
        weight_decay: spec.weight_decay,
        seed: spec.seed,
        augment: spec.augment,
    };
    let (image, trace) = optimize(handle, &objective, &run)?;
    finish(handle, &objective, image, trace, spec.mask_threshold, Recipe::Fv(spec.clone()))
}

/// Class-conditional visualisation of one neuron.
pub fn generate_illusion(handle: &ClassifierHandle, spec: &IllusionSpec) -> Result<IllusionResult> {
    spec.validate(handle)?;
    let class_id = match spec.class_id {
        Some(c) => c,
        None => top_classes_for_neuron(handle.decision_layer(), spec.neuron_id, 1)?[0],
    };
    let class_name = &handle.class_names()[class_id];
    let objective = Objective {
        neuron_id: spec.neuron_id,
        class_term: Some((class_id, spec.gamma)),
        alignment: Some(prompt_alignment(&spec.encoder, class_name, &spec.prompt_templates, spec.epsilon)?),
    };
    let run = RunSettings {
        steps: spec.steps,
        learning_rate: spec.learning_rate,
        weight_decay: spec.weight_decay,
        seed: spec.seed,
        augment: spec.augment,
    };
    let (image, trace) = optimize(handle, &objective, &run)?;
    let recipe = Recipe::Illusion(IllusionSpec {
        class_id: Some(class_id),
        ..spec.clone()
    });
    finish(handle, &objective, image, trace, spec.mask_threshold, recipe)
}

/// The `k` classes with the largest coefficient on `neuron_id`, descending;
/// ties go to the lower class id.
pub fn top_classes_for_neuron(layer: &DecisionLayer, neuron_id: usize, k: usize) -> Result<Vec<usize>> {
    layer.check_neuron(neuron_id)?;
    if k == 0 || k > layer.num_classes {
        return Err(Error::InvalidConfig(format!(
            "k must lie in 1..={}, got {k}",
            layer.num_classes
        )));
    }
    let column = layer.column(neuron_id);
    let mut classes: Vec<usize> = (0..layer.num_classes).collect();
    classes.sort_by(|&a, &b| column[b].total_cmp(&column[a]).then(a.cmp(&b)));
    classes.truncate(k);
    Ok(classes)
}

/// One illusion per class among the neuron's top `k` classes, in ranking
/// order. `base.class_id` is ignored.
pub fn generate_gallery(handle: &ClassifierHandle, base: &IllusionSpec, k: usize) -> Result<Vec<IllusionResult>> {
    let k = k.min(handle.num_classes());
    let classes = top_classes_for_neuron(handle.decision_layer(), base.neuron_id, k)?;
    classes
        .par_iter()
        .map(|&c| {
            generate_illusion(
                handle,
                &IllusionSpec {
                    class_id: Some(c),
                    ..base.clone()
                },
            )
        })
        .collect()
}

/// Write `{neuron}/{class}.png`, the masked variant and the trace. FV results
/// use `fv` in place of the class. Returns the paths of the unmasked images.
pub fn save_gallery(root: &Path, results: &[IllusionResult]) -> Result<Vec<PathBuf>> {
    let mut paths = Vec::with_capacity(results.len());
    for r in results {
        let dir = root.join(r.neuron_id.to_string());
        std::fs::create_dir_all(&dir)?;
        let stem = r.class_id.map_or_else(|| "fv".to_string(), |c| c.to_string());
        let path = dir.join(format!("{stem}.png"));
        write_png(&path, &r.image)?;
        write_png(&dir.join(format!("{stem}_masked.png")), &r.masked_image)?;
        std::fs::write(dir.join(format!("{stem}.trace.json")), serde_json::to_vec(&r.trace)?)?;
        paths.push(path);
    }
    Ok(paths)
}

/// Cosine similarity between the image embedding and `text_embedding`.
pub fn clip_alignment(encoder: &dyn ImageEncoder, image: &Image, text_embedding: &[f64]) -> Result<f64> {
    if encoder.embedding_dim() != text_embedding.len() {
        return Err(Error::shape(encoder.embedding_dim(), text_embedding.len()));
    }
    Ok(cosine(&encoder.embed(image)?, text_embedding))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoreRelevance {
    pub neuron_id: usize,
    pub class_id: Option<usize>,
    /// `with_mask_sim - without_mask_sim`.
    pub score: f64,
    pub with_mask_sim: f64,
    pub without_mask_sim: f64,
}

/// Mean feature vector of a class's images.
pub fn class_representative(handle: &ClassifierHandle, split: &Dataset, class_id: usize) -> Result<FeatureVector> {
    handle.decision_layer().check_class(class_id)?;
    let images: Vec<Image> = split
        .samples
        .iter()
        .filter(|s| s.label == class_id)
        .map(|s| s.image.clone())
        .collect();
    if images.is_empty() {
        return Err(Error::EmptySplit);
    }
    let features = handle.extract_features(&images)?;
    let mut mean = vec![0.0; handle.feature_dim()];
    for f in &features {
        for (m, x) in mean.iter_mut().zip(f.as_slice()) {
            *m += x / features.len() as f64;
        }
    }
    Ok(FeatureVector(mean))
}

/// How much closer masking brings the visualisation to the class
/// representative. Low or negative scores point at features unrelated to the
/// class itself.
pub fn core_relevance(
    result: &IllusionResult,
    representative: &FeatureVector,
    handle: &ClassifierHandle,
) -> Result<CoreRelevance> {
    if result.mask_degenerate {
        return Err(Error::DegenerateMap);
    }
    let features = handle.extract_features(&[result.masked_image.clone(), result.image.clone()])?;
    let rep = representative.as_slice();
    let with_mask_sim = cosine(features[0].as_slice(), rep);
    let without_mask_sim = cosine(features[1].as_slice(), rep);
    Ok(CoreRelevance {
        neuron_id: result.neuron_id,
        class_id: result.class_id,
        score: with_mask_sim - without_mask_sim,
        with_mask_sim,
        without_mask_sim,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{split_classifier, ModelDescriptor};

    fn toy() -> ClassifierHandle {
        split_classifier(&ModelDescriptor::Registry {
            name: "toy-cnn".into(),
            num_classes: 4,
            seed: 0,
            input_size: None,
            class_names: Some(["cat", "dog", "bear", "bird"].map(String::from).to_vec()),
        })
        .unwrap()
        .handle
    }

    #[test]
    fn zero_steps_returns_initial_noise() {
        let handle = toy();
        let spec = FvSpec {
            steps: 0,
            ..FvSpec::new(2)
        };
        let r = generate_fv(&handle, &spec).unwrap();
        let noise = noise_image(&handle, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(r.image, noise);
        assert!(r.trace.is_empty());
    }

    #[test]
    fn reported_activation_matches_extractor() {
        let handle = toy();
        let spec = FvSpec {
            steps: 20,
            ..FvSpec::new(1)
        };
        let r = generate_fv(&handle, &spec).unwrap();
        let f = handle.extract_features(std::slice::from_ref(&r.image)).unwrap();
        assert!((r.activation - f[0][1]).abs() <= 1e-4 * f[0][1].abs().max(1e-12));
    }

    #[test]
    fn one_hot_column_puts_its_class_first() {
        let mut layer = DecisionLayer::zeros(10, 3);
        *layer.coef_mut(7, 1) = 1.0;
        assert_eq!(top_classes_for_neuron(&layer, 1, 3).unwrap(), vec![7, 0, 1]);
        assert!(top_classes_for_neuron(&layer, 3, 1).is_err());
        assert!(top_classes_for_neuron(&layer, 1, 11).is_err());
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let handle = toy();
        let mut spec = IllusionSpec::new(0, Some(1));
        spec.gamma = 1.5;
        assert!(generate_illusion(&handle, &spec).is_err());
        let mut spec = IllusionSpec::new(0, Some(1));
        spec.encoder = "vit-b-32".into();
        assert!(matches!(generate_illusion(&handle, &spec), Err(Error::EncoderUnavailable(_))));
    }
}
