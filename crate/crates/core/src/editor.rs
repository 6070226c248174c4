//! Decision-layer editing driven by the probability-change ratio of a
//! (class, neuron) pair, and the coefficient-constraint baseline.
//!
//! For class `i` and neuron `k` with activation `a`, zeroing the neuron
//! removes `a * B[j][k]` from every logit `j`. With `l'` the logits after the
//! removal and `s_j = exp(a * (B[j][k] - B[i][k]))`, the ratio of class
//! `i`'s probability before and after is
//!
//! ```text
//! p_i / p'_i = sum_j exp(l'_j) / sum_j s_j * exp(l'_j)
//! ```
//!
//! A ratio of 1 means the neuron moves class `i` no more than the others.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{log_sum_exp, softmax, ClassifierHandle, DecisionLayer, FeatureVector};
use crate::optim::{AdamConfig, LrSchedule};
use crate::train::{
    score, train_decision_layer, CheckpointRule, EpochRecord, LabeledFeatures, LayerGrad, Regularizer,
    TrainConfig, ValidationScore,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioReport {
    pub class_id: usize,
    pub neuron_id: usize,
    pub ratio: f64,
    pub log_ratio: f64,
    /// `exp(a * (B[j][k] - B[i][k]))` per class `j`.
    pub substitution_terms: Vec<f64>,
    /// Quotient of two full softmax evaluations, kept for audit.
    pub brute_force_ratio: f64,
    pub features_used: FeatureVector,
}

fn check_pair(layer: &DecisionLayer, features: &[f64], class_id: usize, neuron_id: usize) -> Result<()> {
    layer.check_class(class_id)?;
    layer.check_neuron(neuron_id)?;
    layer.check_features(features)
}

/// `log(p_i / p'_i)` in log space, from the substitution terms.
pub fn log_ratio(layer: &DecisionLayer, features: &[f64], class_id: usize, neuron_id: usize) -> f64 {
    let a = features[neuron_id];
    let bik = layer.coef(class_id, neuron_id);
    let removed: Vec<f64> = layer
        .logits(features)
        .iter()
        .enumerate()
        .map(|(j, l)| l - layer.coef(j, neuron_id) * a)
        .collect();
    let substituted: Vec<f64> = removed
        .iter()
        .enumerate()
        .map(|(j, l)| l + a * (layer.coef(j, neuron_id) - bik))
        .collect();
    log_sum_exp(&removed) - log_sum_exp(&substituted)
}

/// Zero the neuron, recompute both softmaxes, divide.
pub fn brute_force_ratio(layer: &DecisionLayer, features: &[f64], class_id: usize, neuron_id: usize) -> f64 {
    let mut zeroed = features.to_vec();
    zeroed[neuron_id] = 0.0;
    let l = layer.logits(features);
    let lz = layer.logits(&zeroed);
    let log_p = l[class_id] - log_sum_exp(&l);
    let log_pz = lz[class_id] - log_sum_exp(&lz);
    (log_p - log_pz).exp()
}

pub fn probability_ratio(
    layer: &DecisionLayer,
    features: &FeatureVector,
    class_id: usize,
    neuron_id: usize,
) -> Result<RatioReport> {
    let f = features.as_slice();
    check_pair(layer, f, class_id, neuron_id)?;
    if f.iter().chain(&layer.coefficients).chain(&layer.biases).any(|x| !x.is_finite()) {
        return Err(Error::NumericOverflow);
    }
    let a = f[neuron_id];
    let bik = layer.coef(class_id, neuron_id);
    let log_r = log_ratio(layer, f, class_id, neuron_id);
    if !log_r.is_finite() {
        return Err(Error::NumericOverflow);
    }
    Ok(RatioReport {
        class_id,
        neuron_id,
        ratio: log_r.exp(),
        log_ratio: log_r,
        substitution_terms: (0..layer.num_classes)
            .map(|j| (a * (layer.coef(j, neuron_id) - bik)).exp())
            .collect(),
        brute_force_ratio: brute_force_ratio(layer, f, class_id, neuron_id),
        features_used: features.clone(),
    })
}

/// Gradient of `log(p_i / p'_i)` with respect to the layer, at fixed features.
pub fn log_ratio_grad(layer: &DecisionLayer, features: &[f64], class_id: usize, neuron_id: usize) -> LayerGrad {
    let d = layer.feature_dim;
    let a = features[neuron_id];
    let l = layer.logits(features);
    let removed: Vec<f64> = l
        .iter()
        .enumerate()
        .map(|(j, x)| x - layer.coef(j, neuron_id) * a)
        .collect();
    let p = softmax(&l);
    let q = softmax(&removed);
    let mut g = LayerGrad::zeros_like(layer);
    for j in 0..layer.num_classes {
        let diff = q[j] - p[j];
        for m in 0..d {
            g.coefficients[j * d + m] = if m == neuron_id {
                a * (f64::from(u8::from(j == class_id)) - p[j])
            } else {
                diff * features[m]
            };
        }
        g.biases[j] = diff;
    }
    g
}

/// `o = (r_min - 1) / 3 + 1`, with `r_min` the smallest ratio over `targets`.
pub fn suggest_o(layer: &DecisionLayer, mean_features: &FeatureVector, targets: &[EditTarget]) -> Result<f64> {
    if targets.is_empty() {
        return Err(Error::InvalidConfig("at least one target is required".into()));
    }
    let mut r_min = f64::INFINITY;
    for t in targets {
        r_min = r_min.min(probability_ratio(layer, mean_features, t.class_id, t.neuron_id)?.ratio);
    }
    Ok((r_min - 1.0) / 3.0 + 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EditTarget {
    pub class_id: usize,
    pub neuron_id: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditMethod {
    /// Squared deviation of the probability-change ratio from `o`.
    Ratio,
    /// Squared class-`i` contribution `a * B[i][k] + b_i`.
    Constraint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditPlan {
    pub targets: Vec<EditTarget>,
    #[serde(default = "default_method")]
    pub method: EditMethod,
    pub o: f64,
    pub lambda3: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: LrSchedule,
    pub optimizer: AdamConfig,
    pub checkpoint_rule: CheckpointRule,
    pub patience: Option<usize>,
    pub seed: u64,
}

fn default_method() -> EditMethod {
    EditMethod::Ratio
}

impl EditPlan {
    pub fn new(targets: Vec<EditTarget>) -> Self {
        Self {
            targets,
            method: EditMethod::Ratio,
            o: 1.0,
            lambda3: 1.0,
            epochs: 20,
            batch_size: 16,
            schedule: LrSchedule::WarmupCosine {
                max_lr: 1e-3,
                warmup_fraction: 0.1,
            },
            optimizer: AdamConfig::default(),
            checkpoint_rule: CheckpointRule::BestValidation,
            patience: Some(5),
            seed: 0,
        }
    }

    /// Settings for planted scenarios, whose validation split carries the
    /// confound: best-validation selection would reward the shortcut, so the
    /// last epoch is kept and every epoch runs.
    pub fn planted(targets: Vec<EditTarget>) -> Self {
        Self {
            checkpoint_rule: CheckpointRule::Last,
            patience: None,
            ..Self::new(targets)
        }
    }

    /// Same schedule, constraint regulariser instead of the ratio.
    pub fn constraint(targets: Vec<EditTarget>) -> Self {
        Self {
            method: EditMethod::Constraint,
            ..Self::new(targets)
        }
    }

    pub fn validate(&self, layer: &DecisionLayer) -> Result<()> {
        if self.targets.is_empty() {
            return Err(Error::InvalidConfig("edit plan has no targets".into()));
        }
        if !(self.o > 0.0 && self.o.is_finite()) {
            return Err(Error::InvalidConfig(format!("o must be positive, got {}", self.o)));
        }
        if !(self.lambda3 >= 0.0 && self.lambda3.is_finite()) {
            return Err(Error::InvalidConfig(format!("lambda3 must be non-negative, got {}", self.lambda3)));
        }
        for t in &self.targets {
            layer.check_class(t.class_id)?;
            layer.check_neuron(t.neuron_id)?;
        }
        Ok(())
    }

    fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            schedule: self.schedule,
            optimizer: self.optimizer,
            seed: self.seed,
            checkpoint: self.checkpoint_rule,
            patience: self.patience,
            include_initial: false,
        }
    }
}

fn batch_mean(batch: &[&FeatureVector], dim: usize) -> Vec<f64> {
    let mut mean = vec![0.0; dim];
    for f in batch {
        for (m, x) in mean.iter_mut().zip(f.as_slice()) {
            *m += x;
        }
    }
    let n = batch.len().max(1) as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    mean
}

/// `lambda3 * sum_targets (p_i / p'_i - o)^2`, at the batch's mean features.
#[derive(Debug, Clone, PartialEq)]
pub struct RatioRegularizer {
    pub targets: Vec<EditTarget>,
    pub o: f64,
    pub lambda3: f64,
}

impl RatioRegularizer {
    pub fn at_features(&self, layer: &DecisionLayer, features: &[f64], grad: Option<&mut LayerGrad>) -> f64 {
        let mut grad = grad;
        let mut total = 0.0;
        for t in &self.targets {
            let r = log_ratio(layer, features, t.class_id, t.neuron_id).exp();
            total += self.lambda3 * (r - self.o).powi(2);
            if let Some(g) = grad.as_deref_mut() {
                let scale = 2.0 * self.lambda3 * (r - self.o) * r;
                let d = log_ratio_grad(layer, features, t.class_id, t.neuron_id);
                for (a, b) in g.coefficients.iter_mut().zip(&d.coefficients) {
                    *a += scale * b;
                }
                for (a, b) in g.biases.iter_mut().zip(&d.biases) {
                    *a += scale * b;
                }
            }
        }
        total
    }
}

impl Regularizer for RatioRegularizer {
    fn value_and_grad(&self, layer: &DecisionLayer, batch: &[&FeatureVector], grad: &mut LayerGrad) -> f64 {
        if self.lambda3 == 0.0 {
            return 0.0;
        }
        let mean = batch_mean(batch, layer.feature_dim);
        self.at_features(layer, &mean, Some(grad))
    }
}

/// `lambda * sum_targets (a_k * B[i][k] + b_i)^2`, at the batch's mean features.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintRegularizer {
    pub targets: Vec<EditTarget>,
    pub lambda: f64,
}

impl ConstraintRegularizer {
    pub fn at_features(&self, layer: &DecisionLayer, features: &[f64], grad: Option<&mut LayerGrad>) -> f64 {
        let mut grad = grad;
        let d = layer.feature_dim;
        let mut total = 0.0;
        for t in &self.targets {
            let a = features[t.neuron_id];
            let x = a * layer.coef(t.class_id, t.neuron_id) + layer.biases[t.class_id];
            total += self.lambda * x * x;
            if let Some(g) = grad.as_deref_mut() {
                g.coefficients[t.class_id * d + t.neuron_id] += 2.0 * self.lambda * x * a;
                g.biases[t.class_id] += 2.0 * self.lambda * x;
            }
        }
        total
    }
}

impl Regularizer for ConstraintRegularizer {
    fn value_and_grad(&self, layer: &DecisionLayer, batch: &[&FeatureVector], grad: &mut LayerGrad) -> f64 {
        if self.lambda == 0.0 {
            return 0.0;
        }
        let mean = batch_mean(batch, layer.feature_dim);
        self.at_features(layer, &mean, Some(grad))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditOutcome {
    pub plan: EditPlan,
    pub original_layer: DecisionLayer,
    pub edited_layer: DecisionLayer,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stopped_early: bool,
    pub val_before: ValidationScore,
    pub val_after: ValidationScore,
    /// Ratios at the mean training features of each target's class.
    pub ratios_before: Vec<RatioReport>,
    pub ratios_after: Vec<RatioReport>,
    pub extractor_digest: String,
}

fn target_ratios(layer: &DecisionLayer, train: &LabeledFeatures, targets: &[EditTarget]) -> Result<Vec<RatioReport>> {
    targets
        .iter()
        .map(|t| {
            let mean = train
                .of_class(t.class_id)
                .mean_features()
                .or_else(|| train.mean_features())
                .ok_or(Error::EmptySplit)?;
            probability_ratio(layer, &mean, t.class_id, t.neuron_id)
        })
        .collect()
}

/// Retrain only the decision layer of `handle` under `plan`.
///
/// `train` should be the features of the original training set; `val`
/// drives checkpoint selection and early stopping.
pub fn edit_decision_layer(
    handle: &mut ClassifierHandle,
    train: &LabeledFeatures,
    val: &LabeledFeatures,
    plan: &EditPlan,
) -> Result<EditOutcome> {
    let original = handle.decision_weights();
    plan.validate(&original)?;
    let digest = handle.extractor().parameter_digest();
    let regularizer: Box<dyn Regularizer> = match plan.method {
        EditMethod::Ratio => Box::new(RatioRegularizer {
            targets: plan.targets.clone(),
            o: plan.o,
            lambda3: plan.lambda3,
        }),
        EditMethod::Constraint => Box::new(ConstraintRegularizer {
            targets: plan.targets.clone(),
            lambda: plan.lambda3,
        }),
    };
    let ratios_before = target_ratios(&original, train, &plan.targets)?;
    let val_before = score(&original, val)?;
    let result = train_decision_layer(&original, train, val, regularizer.as_ref(), &plan.train_config())?;
    let ratios_after = target_ratios(&result.layer, train, &plan.targets)?;
    let val_after = score(&result.layer, val)?;
    handle.set_decision_layer(result.layer.clone())?;
    debug_assert_eq!(digest, handle.extractor().parameter_digest());
    Ok(EditOutcome {
        plan: plan.clone(),
        original_layer: original,
        edited_layer: result.layer,
        history: result.history,
        best_epoch: result.best_epoch,
        stopped_early: result.stopped_early,
        val_before,
        val_after,
        ratios_before,
        ratios_after,
        extractor_digest: digest,
    })
}

/// The coefficient-constraint baseline with the same training schedule as `plan`.
pub fn con_baseline(
    handle: &mut ClassifierHandle,
    train: &LabeledFeatures,
    val: &LabeledFeatures,
    plan: &EditPlan,
) -> Result<EditOutcome> {
    let plan = EditPlan {
        method: EditMethod::Constraint,
        ..plan.clone()
    };
    edit_decision_layer(handle, train, val, &plan)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_layer(rng: &mut ChaCha8Rng, c: usize, d: usize) -> DecisionLayer {
        DecisionLayer::new(
            c,
            d,
            (0..c * d).map(|_| rng.random_range(-2.0..2.0)).collect(),
            (0..c).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn zero_activation_gives_unit_ratio() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let layer = random_layer(&mut rng, 4, 3);
        let r = probability_ratio(&layer, &FeatureVector(vec![1.0, 0.0, 2.0]), 2, 1).unwrap();
        assert_eq!(r.ratio, 1.0);
        assert!(r.substitution_terms.iter().all(|s| *s == 1.0));
    }

    #[test]
    fn identical_column_gives_unit_ratio() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut layer = random_layer(&mut rng, 4, 3);
        for j in 0..4 {
            *layer.coef_mut(j, 0) = 0.7;
        }
        let r = probability_ratio(&layer, &FeatureVector(vec![1.5, 0.3, 2.0]), 1, 0).unwrap();
        assert!((r.ratio - 1.0).abs() < 1e-15);
    }

    #[test]
    fn three_class_example_matches_direct_softmax() {
        // column k = (1.0, 0.2, -0.5), a = 2, and biases chosen so that the
        // logits with the neuron removed are (0.5, 0.1, -0.3)
        let layer = DecisionLayer::new(3, 1, vec![1.0, 0.2, -0.5], vec![0.5, 0.1, -0.3]).unwrap();
        let f = FeatureVector(vec![2.0]);
        let full = [2.5f64, 0.5, -1.3];
        let removed = [0.5f64, 0.1, -0.3];
        let p0 = full[0].exp() / full.iter().map(|x| x.exp()).sum::<f64>();
        let q0 = removed[0].exp() / removed.iter().map(|x| x.exp()).sum::<f64>();
        let r = probability_ratio(&layer, &f, 0, 0).unwrap();
        assert!((r.ratio - p0 / q0).abs() <= 1e-9);
        assert!((r.brute_force_ratio - p0 / q0).abs() <= 1e-9);
    }

    #[test]
    fn large_logits_stay_finite() {
        let layer = DecisionLayer::new(2, 1, vec![300.0, -300.0], vec![0.0, 0.0]).unwrap();
        let r = probability_ratio(&layer, &FeatureVector(vec![5.0]), 1, 0).unwrap();
        assert!(r.log_ratio.is_finite());
        let err = probability_ratio(&layer, &FeatureVector(vec![f64::NAN]), 1, 0).unwrap_err();
        assert!(matches!(err, Error::NumericOverflow));
    }

    #[test]
    fn suggest_o_arithmetic() {
        let layer = DecisionLayer::new(2, 1, vec![0.0, 0.0], vec![0.0, 0.0]).unwrap();
        let t = [EditTarget { class_id: 0, neuron_id: 0 }];
        assert_eq!(suggest_o(&layer, &FeatureVector(vec![1.0]), &t).unwrap(), 1.0);
        // two classes, ratio = 2 / (1 + exp(-x)) with x = a * (B0 - B1)
        let x = -(2.0f64 / 1.09 - 1.0).ln();
        let layer = DecisionLayer::new(2, 1, vec![x, 0.0], vec![0.0, 0.0]).unwrap();
        let o = suggest_o(&layer, &FeatureVector(vec![1.0]), &t).unwrap();
        assert!((o - 1.03).abs() < 1e-12, "{o}");
        assert!(suggest_o(&layer, &FeatureVector(vec![1.0]), &[]).is_err());
    }

    #[test]
    fn plan_validation() {
        let layer = DecisionLayer::zeros(3, 4);
        let t = vec![EditTarget { class_id: 1, neuron_id: 2 }];
        assert!(EditPlan::new(t.clone()).validate(&layer).is_ok());
        assert!(EditPlan::new(vec![]).validate(&layer).is_err());
        assert!(EditPlan { o: 0.0, ..EditPlan::new(t.clone()) }.validate(&layer).is_err());
        assert!(EditPlan { lambda3: -1.0, ..EditPlan::new(t.clone()) }.validate(&layer).is_err());
        let bad = vec![EditTarget { class_id: 1, neuron_id: 4 }];
        assert!(matches!(
            EditPlan::new(bad).validate(&layer),
            Err(Error::NeuronOutOfRange { .. })
        ));
    }

    #[test]
    fn constraint_is_zero_for_zero_weight_and_bias() {
        let layer = DecisionLayer::zeros(3, 2);
        let reg = ConstraintRegularizer {
            targets: vec![EditTarget { class_id: 1, neuron_id: 0 }],
            lambda: 1.0,
        };
        assert_eq!(reg.at_features(&layer, &[3.0, 1.0], None), 0.0);
    }
}
