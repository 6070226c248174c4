//! Mini-batch training of the decision layer on precomputed features.
//!
//! The feature extractor is frozen throughout, so features are computed once
//! and every epoch only touches the dense layer.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{argmax, log_sum_exp, softmax, ClassifierHandle, DecisionLayer, FeatureVector};
use crate::optim::{Adam, AdamConfig, LrSchedule};
use crate::scenarios::Dataset;

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledFeatures {
    pub features: Vec<FeatureVector>,
    pub labels: Vec<usize>,
}

impl LabeledFeatures {
    pub fn from_dataset(handle: &ClassifierHandle, dataset: &Dataset) -> Result<Self> {
        Ok(Self {
            features: handle.extract_features(&dataset.images())?,
            labels: dataset.labels(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn mean_features(&self) -> Option<FeatureVector> {
        FeatureVector::mean_of(&self.features)
    }

    /// Samples whose label is `class_id`.
    pub fn of_class(&self, class_id: usize) -> LabeledFeatures {
        let keep: Vec<usize> = (0..self.len()).filter(|&i| self.labels[i] == class_id).collect();
        Self {
            features: keep.iter().map(|&i| self.features[i].clone()).collect(),
            labels: keep.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

/// Which epoch's weights to keep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointRule {
    /// Highest mean validation accuracy.
    BestValidation,
    /// Highest worst-class validation accuracy.
    MinClassAccuracy,
    Last,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: LrSchedule,
    pub optimizer: AdamConfig,
    pub seed: u64,
    pub checkpoint: CheckpointRule,
    /// Stop after this many consecutive epochs without a better checkpoint.
    pub patience: Option<usize>,
    /// Let the untrained layer (epoch 0) win the checkpoint comparison.
    pub include_initial: bool,
}

impl TrainConfig {
    /// Probe fitting on frozen features: Adam at 0.002 with cosine
    /// annealing, batch 8, 20 epochs, best-validation checkpoint.
    pub fn probe(seed: u64) -> Self {
        Self {
            epochs: 20,
            batch_size: 8,
            schedule: LrSchedule::Cosine { lr: 0.002, min_lr: 0.0 },
            optimizer: AdamConfig::adamw(0.0),
            seed,
            checkpoint: CheckpointRule::BestValidation,
            patience: None,
            include_initial: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be positive".into()));
        }
        if !(self.schedule.peak() > 0.0 && self.schedule.peak().is_finite()) {
            return Err(Error::InvalidConfig("learning rate must be positive".into()));
        }
        Ok(())
    }
}

/// Gradient buffers laid out like [`DecisionLayer`].
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub coefficients: Vec<f64>,
    pub biases: Vec<f64>,
}

impl LayerGrad {
    pub fn zeros_like(layer: &DecisionLayer) -> Self {
        Self {
            coefficients: vec![0.0; layer.coefficients.len()],
            biases: vec![0.0; layer.biases.len()],
        }
    }

    fn flat(&self) -> Vec<f64> {
        self.coefficients.iter().chain(&self.biases).copied().collect()
    }
}

/// Extra loss term on the decision layer, evaluated per batch.
pub trait Regularizer: Send + Sync {
    /// Returns the weighted penalty for `batch` and adds its gradient into `grad`.
    fn value_and_grad(&self, layer: &DecisionLayer, batch: &[&FeatureVector], grad: &mut LayerGrad) -> f64;
}

/// No penalty.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoRegularizer;

impl Regularizer for NoRegularizer {
    fn value_and_grad(&self, _: &DecisionLayer, _: &[&FeatureVector], _: &mut LayerGrad) -> f64 {
        0.0
    }
}

/// Mean cross-entropy over a batch; adds its gradient into `grad` when given.
pub fn cross_entropy(
    layer: &DecisionLayer,
    features: &[&FeatureVector],
    labels: &[usize],
    mut grad: Option<&mut LayerGrad>,
) -> f64 {
    let n = features.len() as f64;
    let d = layer.feature_dim;
    let mut total = 0.0;
    for (f, &y) in features.iter().zip(labels) {
        let logits = layer.logits(f.as_slice());
        total += log_sum_exp(&logits) - logits[y];
        if let Some(g) = grad.as_deref_mut() {
            let mut p = softmax(&logits);
            p[y] -= 1.0;
            for (i, pi) in p.iter().enumerate() {
                let scale = pi / n;
                for (gc, fk) in g.coefficients[i * d..(i + 1) * d].iter_mut().zip(f.as_slice()) {
                    *gc += scale * fk;
                }
                g.biases[i] += scale;
            }
        }
    }
    total / n
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationScore {
    pub accuracy: f64,
    pub min_class_accuracy: f64,
}

pub fn score(layer: &DecisionLayer, data: &LabeledFeatures) -> Result<ValidationScore> {
    if data.is_empty() {
        return Err(Error::EmptySplit);
    }
    let mut correct = vec![0usize; layer.num_classes];
    let mut count = vec![0usize; layer.num_classes];
    for (f, &y) in data.features.iter().zip(&data.labels) {
        layer.check_class(y)?;
        count[y] += 1;
        correct[y] += usize::from(argmax(&layer.logits(f.as_slice())) == y);
    }
    let accuracy = correct.iter().sum::<usize>() as f64 / data.len() as f64;
    let min_class_accuracy = (0..layer.num_classes)
        .filter(|&c| count[c] > 0)
        .map(|c| correct[c] as f64 / count[c] as f64)
        .fold(f64::INFINITY, f64::min);
    Ok(ValidationScore {
        accuracy,
        min_class_accuracy,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 0 is the layer before any update.
    pub epoch: usize,
    pub train_ce: f64,
    /// Weighted penalty, averaged over batches.
    pub regularizer: f64,
    pub val_acc: f64,
    pub val_min_class_acc: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainResult {
    pub layer: DecisionLayer,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

fn checkpoint_metric(rule: CheckpointRule, record: &EpochRecord) -> f64 {
    match rule {
        CheckpointRule::BestValidation => record.val_acc,
        CheckpointRule::MinClassAccuracy => record.val_min_class_acc,
        CheckpointRule::Last => record.epoch as f64,
    }
}

fn set_flat(layer: &mut DecisionLayer, flat: &[f64]) {
    let n = layer.coefficients.len();
    layer.coefficients.copy_from_slice(&flat[..n]);
    layer.biases.copy_from_slice(&flat[n..]);
}

/// Train `initial` on `train` with cross-entropy plus `regularizer`.
pub fn train_decision_layer(
    initial: &DecisionLayer,
    train: &LabeledFeatures,
    val: &LabeledFeatures,
    regularizer: &dyn Regularizer,
    config: &TrainConfig,
) -> Result<TrainResult> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::EmptySplit);
    }
    for f in &train.features {
        initial.check_features(f.as_slice())?;
    }
    for &y in &train.labels {
        initial.check_class(y)?;
    }

    let all: Vec<&FeatureVector> = train.features.iter().collect();
    let initial_ce = cross_entropy(initial, &all, &train.labels, None);
    let initial_score = score(initial, val)?;
    let mut history = vec![EpochRecord {
        epoch: 0,
        train_ce: initial_ce,
        regularizer: regularizer.value_and_grad(initial, &all, &mut LayerGrad::zeros_like(initial)),
        val_acc: initial_score.accuracy,
        val_min_class_acc: initial_score.min_class_accuracy,
        lr: 0.0,
    }];

    let mut layer = initial.clone();
    let mut params: Vec<f64> = layer.coefficients.iter().chain(&layer.biases).copied().collect();
    let mut adam = Adam::new(config.optimizer, params.len());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let batches_per_epoch = train.len().div_ceil(config.batch_size);
    let total_steps = batches_per_epoch * config.epochs;

    let mut best = if config.include_initial || config.epochs == 0 {
        Some((0, checkpoint_metric(config.checkpoint, &history[0]), layer.clone()))
    } else {
        None
    };
    let mut since_best = 0;
    let mut stopped_early = false;
    let mut step = 0;

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let (mut ce_sum, mut reg_sum, mut lr) = (0.0, 0.0, 0.0);
        for chunk in order.chunks(config.batch_size) {
            let feats: Vec<&FeatureVector> = chunk.iter().map(|&i| &train.features[i]).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| train.labels[i]).collect();
            let mut grad = LayerGrad::zeros_like(&layer);
            ce_sum += cross_entropy(&layer, &feats, &labels, Some(&mut grad));
            reg_sum += regularizer.value_and_grad(&layer, &feats, &mut grad);
            lr = config.schedule.at(step, total_steps);
            adam.step(&mut params, &grad.flat(), lr);
            set_flat(&mut layer, &params);
            step += 1;
        }
        let train_ce = ce_sum / batches_per_epoch as f64;
        if !train_ce.is_finite() || train_ce > 10.0 * initial_ce.max(1e-12) {
            return Err(Error::DivergenceDetected {
                epoch,
                loss: train_ce,
                initial: initial_ce,
            });
        }
        let s = score(&layer, val)?;
        let record = EpochRecord {
            epoch,
            train_ce,
            regularizer: reg_sum / batches_per_epoch as f64,
            val_acc: s.accuracy,
            val_min_class_acc: s.min_class_accuracy,
            lr,
        };
        let metric = checkpoint_metric(config.checkpoint, &record);
        history.push(record);
        match &best {
            Some((_, m, _)) if metric <= *m => since_best += 1,
            _ => {
                best = Some((epoch, metric, layer.clone()));
                since_best = 0;
            }
        }
        if let Some(p) = config.patience {
            if config.checkpoint != CheckpointRule::Last && since_best >= p && epoch < config.epochs {
                stopped_early = true;
                break;
            }
        }
    }

    let (best_epoch, _, layer) = best.expect("at least one candidate epoch");
    Ok(TrainResult {
        layer,
        history,
        best_epoch,
        stopped_early,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn blobs(seed: u64, n: usize) -> LabeledFeatures {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let centers = [[2.0, 0.0, 0.0], [0.0, 2.0, 0.0], [0.0, 0.0, 2.0]];
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let c = i % 3;
            features.push(FeatureVector(
                centers[c].iter().map(|m| m + rng.random_range(-0.5..0.5)).collect(),
            ));
            labels.push(c);
        }
        LabeledFeatures { features, labels }
    }

    fn config() -> TrainConfig {
        TrainConfig {
            epochs: 30,
            batch_size: 8,
            schedule: LrSchedule::Constant { lr: 0.05 },
            optimizer: AdamConfig::adam(0.0),
            seed: 3,
            checkpoint: CheckpointRule::BestValidation,
            patience: None,
            include_initial: false,
        }
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let data = blobs(1, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let coef = (0..9).map(|_| rng.random_range(-1.0..1.0)).collect();
        let layer = DecisionLayer::new(3, 3, coef, vec![0.1, 0.0, -0.1]).unwrap();
        let feats: Vec<&FeatureVector> = data.features.iter().collect();
        let mut g = LayerGrad::zeros_like(&layer);
        cross_entropy(&layer, &feats, &data.labels, Some(&mut g));
        let h = 1e-6;
        for (idx, analytic) in g.flat().into_iter().enumerate() {
            let eval = |delta: f64| {
                let mut l = layer.clone();
                if idx < 9 {
                    l.coefficients[idx] += delta;
                } else {
                    l.biases[idx - 9] += delta;
                }
                cross_entropy(&l, &feats, &data.labels, None)
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            assert!((numeric - analytic).abs() <= 1e-6 * (1.0 + numeric.abs()), "{idx}: {numeric} vs {analytic}");
        }
    }

    #[test]
    fn learns_separable_blobs() {
        let train = blobs(1, 60);
        let val = blobs(2, 30);
        let out = train_decision_layer(&DecisionLayer::zeros(3, 3), &train, &val, &NoRegularizer, &config()).unwrap();
        assert_eq!(out.history.len(), 31);
        assert!(out.history[out.best_epoch].val_acc >= 0.99);
        assert!(out.history.last().unwrap().train_ce < out.history[0].train_ce);
        assert!(out.history.iter().all(|r| r.regularizer == 0.0));
    }

    #[test]
    fn same_seed_same_weights() {
        let train = blobs(1, 40);
        let val = blobs(2, 12);
        let a = train_decision_layer(&DecisionLayer::zeros(3, 3), &train, &val, &NoRegularizer, &config()).unwrap();
        let b = train_decision_layer(&DecisionLayer::zeros(3, 3), &train, &val, &NoRegularizer, &config()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn early_stop_on_flat_validation() {
        let train = blobs(1, 30);
        let val = blobs(2, 9);
        let cfg = TrainConfig { patience: Some(5), ..config() };
        let out = train_decision_layer(&DecisionLayer::zeros(3, 3), &train, &val, &NoRegularizer, &cfg).unwrap();
        // perfect validation is reached quickly and cannot be beaten
        assert!(out.stopped_early);
        assert_eq!(out.history.len(), out.best_epoch + 6);
    }

    #[test]
    fn huge_rate_is_flagged_as_divergence() {
        // labels carry no signal, so an oversized step can only overshoot
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let train = LabeledFeatures {
            features: (0..30)
                .map(|_| FeatureVector((0..3).map(|_| rng.random_range(-1.0..1.0)).collect()))
                .collect(),
            labels: (0..30).map(|_| rng.random_range(0..3)).collect(),
        };
        let cfg = TrainConfig {
            schedule: LrSchedule::Constant { lr: 1e3 },
            ..config()
        };
        let err = train_decision_layer(&DecisionLayer::zeros(3, 3), &train, &blobs(2, 9), &NoRegularizer, &cfg).unwrap_err();
        assert!(matches!(err, Error::DivergenceDetected { .. }), "{err:?}");
    }
}
