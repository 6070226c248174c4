//! Backbone pretraining on a pretext task, standing in for the large-scale
//! pretraining a production backbone would come with.
//!
//! The pretext set covers every procedural shape and both confound
//! attributes, independently of each other, so the backbone learns to
//! represent all of them without learning any correlation between them.
//! Each attribute is read out from a single feature unit, which gives the
//! concept one home in the feature space the way a dissected unit would.

use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{argmax, log_sum_exp, softmax, InputSpec};
use crate::nn::io::TensorFile;
use crate::nn::{Backbone, ConvGrad, Stage};
use crate::optim::{Adam, AdamConfig, LrSchedule};
use crate::scenarios::{render_sample, sample_seed, ConfoundAttribute, SHAPES};
use crate::tensor::Image;

pub const ATTRIBUTES: [Option<ConfoundAttribute>; 3] =
    [None, Some(ConfoundAttribute::CheckerPatch), Some(ConfoundAttribute::WaterBand)];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PretextConfig {
    pub per_class: usize,
    pub image_size: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for PretextConfig {
    fn default() -> Self {
        Self {
            per_class: 100,
            image_size: 64,
            epochs: 15,
            batch_size: 8,
            lr: 5e-3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PretextSample {
    pub image: Image,
    pub shape: usize,
    pub attribute: usize,
}

/// Every shape at `per_class` samples, attributes cycled evenly.
pub fn pretext_samples(config: &PretextConfig) -> Vec<PretextSample> {
    let mut out = Vec::with_capacity(SHAPES.len() * config.per_class);
    for shape in 0..SHAPES.len() {
        for i in 0..config.per_class {
            // split index 7 keeps these streams apart from the scenario splits
            let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(config.seed, 7, shape, i));
            let attribute = (i + shape) % ATTRIBUTES.len();
            out.push(PretextSample {
                image: render_sample(config.image_size, shape, ATTRIBUTES[attribute], &mut rng),
                shape,
                attribute,
            });
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub epoch_loss: Vec<f64>,
    pub shape_accuracy: f64,
    pub attribute_accuracy: f64,
}

fn flatten(backbone: &Backbone, head: &[f64]) -> Vec<f64> {
    let mut out = Vec::new();
    for c in backbone.convs() {
        out.extend_from_slice(&c.weight);
        if let Some(b) = &c.bias {
            out.extend_from_slice(b);
        }
    }
    out.extend_from_slice(head);
    out
}

fn flatten_grads(grads: &[ConvGrad], head: &[f64]) -> Vec<f64> {
    let mut out = Vec::new();
    for g in grads {
        out.extend_from_slice(&g.weight);
        if let Some(b) = &g.bias {
            out.extend_from_slice(b);
        }
    }
    out.extend_from_slice(head);
    out
}

fn unflatten(backbone: &mut Backbone, head: &mut [f64], flat: &[f64]) {
    let mut pos = 0;
    backbone.for_each_stage_mut(&mut |s| {
        if let Stage::Conv(c) = s {
            let n = c.weight.len();
            c.weight.copy_from_slice(&flat[pos..pos + n]);
            pos += n;
            if let Some(b) = &mut c.bias {
                let n = b.len();
                b.copy_from_slice(&flat[pos..pos + n]);
                pos += n;
            }
        }
    });
    head.copy_from_slice(&flat[pos..]);
}

const ATTRIBUTE_SCALE: f64 = 8.0;
const ATTRIBUTE_THRESHOLD: f64 = 0.25;

/// Shape logits read every feature; attribute `a` (1 or 2) is read from the
/// single unit `dim - 3 + a`, with "no attribute" pinned at logit 0.
struct Head {
    dim: usize,
    /// `shapes x (dim + 1)`, bias in the last column, then a frozen scale and
    /// bias per attribute.
    weights: Vec<f64>,
}

impl Head {
    fn shapes(&self) -> usize {
        SHAPES.len()
    }

    fn attribute_unit(&self, a: usize) -> usize {
        self.dim - 3 + a
    }

    fn logits(&self, f: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let d = self.dim;
        let shapes = (0..self.shapes())
            .map(|o| {
                let row = &self.weights[o * (d + 1)..(o + 1) * (d + 1)];
                row[..d].iter().zip(f).map(|(w, x)| w * x).sum::<f64>() + row[d]
            })
            .collect();
        let base = self.shapes() * (d + 1);
        let mut attrs = vec![0.0];
        for a in 1..ATTRIBUTES.len() {
            let (scale, bias) = (self.weights[base + 2 * (a - 1)], self.weights[base + 2 * (a - 1) + 1]);
            attrs.push(scale * f[self.attribute_unit(a)] + bias);
        }
        (shapes, attrs)
    }

    fn len(dim: usize) -> usize {
        SHAPES.len() * (dim + 1) + 2 * (ATTRIBUTES.len() - 1)
    }
}

/// Loss and gradients for one sample: cross-entropy over shapes plus
/// cross-entropy over attributes.
fn sample_step(
    backbone: &Backbone,
    spec: &InputSpec,
    head: &Head,
    sample: &PretextSample,
    grads: &mut [ConvGrad],
    head_grad: &mut [f64],
) -> (f64, bool, bool) {
    let (maps, tape) = backbone.forward_recorded(spec.normalize(&sample.image));
    let f = maps.spatial_mean();
    let (ls, la) = head.logits(&f);
    let loss = log_sum_exp(&ls) - ls[sample.shape] + log_sum_exp(&la) - la[sample.attribute];
    let mut dl = softmax(&ls);
    dl[sample.shape] -= 1.0;
    let mut da = softmax(&la);
    da[sample.attribute] -= 1.0;
    let d = head.dim;
    let mut df = vec![0.0; d];
    for (o, g) in dl.iter().enumerate() {
        let row = o * (d + 1);
        for k in 0..d {
            head_grad[row + k] += g * f[k];
            df[k] += g * head.weights[row + k];
        }
        head_grad[row + d] += g;
    }
    let base = head.shapes() * (d + 1);
    for a in 1..ATTRIBUTES.len() {
        let unit = head.attribute_unit(a);
        let j = base + 2 * (a - 1);
        df[unit] += da[a] * head.weights[j];
    }
    let area = (maps.height * maps.width) as f64;
    let mut g = maps;
    for c in 0..g.channels {
        let v = df[c] / area;
        g.plane_mut(c).iter_mut().for_each(|x| *x = v);
    }
    backbone.backward_with_params(&tape, g, grads);
    (loss, argmax(&ls) == sample.shape, argmax(&la) == sample.attribute)
}

/// Train every convolution of `backbone` on the pretext task.
pub fn pretrain_backbone(backbone: &mut Backbone, spec: &InputSpec, config: &PretextConfig) -> Result<PretrainReport> {
    if config.batch_size == 0 || config.per_class == 0 {
        return Err(Error::InvalidConfig("pretext batch size and per-class count must be positive".into()));
    }
    let samples = pretext_samples(config);
    let dim = backbone.out_channels();
    if dim < ATTRIBUTES.len() {
        return Err(Error::UnsupportedArchitecture(format!("{dim} features cannot host the pretext attributes")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5EED);
    let normal = Normal::new(0.0, (1.0 / dim as f64).sqrt()).expect("valid std");
    let mut weights: Vec<f64> = (0..Head::len(dim)).map(|_| normal.sample(&mut rng)).collect();
    let n = weights.len();
    // attribute read-outs are fixed, so the unit itself has to switch on
    for a in 0..ATTRIBUTES.len() - 1 {
        weights[n - 2 * (ATTRIBUTES.len() - 1) + 2 * a] = ATTRIBUTE_SCALE;
        weights[n - 2 * (ATTRIBUTES.len() - 1) + 2 * a + 1] = -ATTRIBUTE_SCALE * ATTRIBUTE_THRESHOLD;
    }
    let mut head = Head { dim, weights };
    let mut params = flatten(backbone, &head.weights);
    let mut adam = Adam::new(AdamConfig::adamw(1e-4), params.len());
    let schedule = LrSchedule::Cosine { lr: config.lr, min_lr: 0.0 };
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let total = samples.len().div_ceil(config.batch_size) * config.epochs;
    let mut step = 0;
    let mut epoch_loss = Vec::with_capacity(config.epochs);
    let (mut shape_hits, mut attr_hits) = (0, 0);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        (shape_hits, attr_hits) = (0, 0);
        for chunk in order.chunks(config.batch_size) {
            let mut grads = backbone.zero_grads();
            let mut head_grad = vec![0.0; head.weights.len()];
            for &i in chunk {
                let (loss, s_ok, a_ok) = sample_step(backbone, spec, &head, &samples[i], &mut grads, &mut head_grad);
                loss_sum += loss;
                shape_hits += usize::from(s_ok);
                attr_hits += usize::from(a_ok);
            }
            let scale = 1.0 / chunk.len() as f64;
            let flat: Vec<f64> = flatten_grads(&grads, &head_grad).into_iter().map(|g| g * scale).collect();
            adam.step(&mut params, &flat, schedule.at(step, total));
            unflatten(backbone, &mut head.weights, &params);
            step += 1;
        }
        let mean = loss_sum / samples.len() as f64;
        if !mean.is_finite() {
            return Err(Error::NonFiniteLoss { step: epoch });
        }
        tracing::debug!(epoch, loss = mean, "pretext epoch");
        epoch_loss.push(mean);
    }
    normalize_output_scale(backbone, spec, &samples);
    let n = samples.len() as f64;
    Ok(PretrainReport {
        epoch_loss,
        shape_accuracy: shape_hits as f64 / n,
        attribute_accuracy: attr_hits as f64 / n,
    })
}

/// Rescale the last convolution so every feature has unit root-mean-square
/// over the pretext set. ReLU commutes with positive scaling, so only the
/// feature scale changes, not which inputs activate a unit.
fn normalize_output_scale(backbone: &mut Backbone, spec: &InputSpec, samples: &[PretextSample]) {
    let dim = backbone.out_channels();
    let mut sq = vec![0.0; dim];
    for s in samples {
        let f = backbone.forward(spec.normalize(&s.image)).spatial_mean();
        for (a, x) in sq.iter_mut().zip(&f) {
            *a += x * x;
        }
    }
    let scale: Vec<f64> = sq
        .iter()
        .map(|a| {
            let rms = (a / samples.len() as f64).sqrt();
            if rms > 1e-12 { 1.0 / rms } else { 1.0 }
        })
        .collect();
    let mut last = None;
    backbone.for_each_stage_mut(&mut |s| {
        if let Stage::Conv(c) = s {
            last = Some(c.name.clone());
        }
    });
    backbone.for_each_stage_mut(&mut |s| {
        if let Stage::Conv(c) = s {
            if Some(&c.name) == last.as_ref() {
                let per_out = c.weight.len() / c.out_channels;
                for (o, k) in scale.iter().enumerate() {
                    c.weight[o * per_out..(o + 1) * per_out].iter_mut().for_each(|w| *w *= k);
                    if let Some(b) = &mut c.bias {
                        b[o] *= k;
                    }
                }
            }
        }
    });
}

/// Bump when pretraining changes, so stale cache files are ignored.
const CACHE_VERSION: u32 = 4;

fn cache_dir() -> PathBuf {
    std::env::var_os("NEURODEBUG_CACHE_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("neurodebug-cache"))
}

/// Pretrain `backbone` in place, reusing an earlier result from the on-disk
/// cache when the initial weights and configuration match exactly.
pub fn pretrain_cached(backbone: &mut Backbone, spec: &InputSpec, config: &PretextConfig) -> Result<()> {
    // threads in one process wait for each other instead of training twice
    static LOCK: std::sync::Mutex<()> = std::sync::Mutex::new(());
    let _guard = LOCK.lock().unwrap_or_else(|e| e.into_inner());
    let mut h = Sha256::new();
    h.update(CACHE_VERSION.to_le_bytes());
    h.update(serde_json::to_vec(config)?);
    h.update(serde_json::to_vec(spec)?);
    for (name, _, values) in backbone.named_parameters() {
        h.update(name.as_bytes());
        for v in values {
            h.update(v.to_le_bytes());
        }
    }
    let key = hex::encode(h.finalize());
    let path = cache_dir().join(format!("pretrained-{}.safetensors", &key[..24]));
    if path.exists() {
        let mut file = TensorFile::read(&path)?;
        let mut restored = backbone.clone();
        if restored.import(&path, &mut file).is_ok() {
            *backbone = restored;
            return Ok(());
        }
        tracing::warn!(path = %path.display(), "ignoring unreadable pretraining cache");
    }
    let report = pretrain_backbone(backbone, spec, config)?;
    tracing::info!(?report, "pretrained backbone");
    let mut file = TensorFile::default();
    backbone.export(&mut file);
    if std::fs::create_dir_all(cache_dir()).is_ok() {
        // write then rename, so concurrent readers never see a partial file
        let tmp = path.with_extension(format!("tmp{}", rand::rng().random::<u32>()));
        if file.write(&tmp).is_ok() {
            let _ = std::fs::rename(&tmp, &path);
        }
    }
    Ok(())
}
