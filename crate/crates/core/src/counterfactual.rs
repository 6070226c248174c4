//! Counterfactual feature perturbations for mistake samples and the
//! per-neuron rank rates aggregated over them.
//!
//! For a misclassified sample with features `f` and true class `y`, the
//! perturbation `omega` minimises
//!
//! ```text
//! CE(decision(f + omega), y) + lambda1 * |omega|_1 + lambda2 * |omega|_2
//! ```
//!
//! starting from zero. A positive entry means the neuron is under-active for
//! the true class ("insufficient"), a negative one that it is over-active
//! ("excessive").

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{argmax, log_sum_exp, softmax, ClassifierHandle, DecisionLayer, FeatureVector};
use crate::scenarios::{Dataset, MistakeSet};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OmegaMethod {
    /// Gradient step on the cross-entropy, then the closed-form proximal map
    /// of the two norms.
    Proximal,
    /// Plain subgradient descent on the full objective.
    Subgradient,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OmegaConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub max_steps: usize,
    /// `None` picks `1 / L`, where `L` bounds the curvature of the
    /// cross-entropy term for this decision layer.
    pub step_size: Option<f64>,
    pub method: OmegaMethod,
}

impl Default for OmegaConfig {
    fn default() -> Self {
        Self {
            lambda1: 0.1,
            lambda2: 0.01,
            max_steps: 200,
            step_size: None,
            method: OmegaMethod::Proximal,
        }
    }
}

impl OmegaConfig {
    fn validate(&self) -> Result<()> {
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return Err(Error::InvalidConfig("lambda1 and lambda2 must be non-negative".into()));
        }
        if let Some(s) = self.step_size {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::InvalidConfig(format!("step size {s} must be positive")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OmegaResult {
    pub sample_id: String,
    pub target_class: usize,
    pub omega: Vec<f64>,
    pub flipped: bool,
    pub steps_used: usize,
    pub final_loss: f64,
    /// Objective after each step; entry 0 is the value at `omega = 0`.
    pub loss_trace: Vec<f64>,
}

fn l1(v: &[f64]) -> f64 {
    v.iter().map(|x| x.abs()).sum()
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn shifted(features: &[f64], omega: &[f64]) -> Vec<f64> {
    features.iter().zip(omega).map(|(f, w)| f + w).collect()
}

fn cross_entropy(layer: &DecisionLayer, features: &[f64], target: usize) -> f64 {
    let logits = layer.logits(features);
    log_sum_exp(&logits) - logits[target]
}

/// Cross-entropy gradient with respect to the features: `B^T (p - e_y)`.
fn cross_entropy_grad(layer: &DecisionLayer, features: &[f64], target: usize) -> Vec<f64> {
    let mut p = softmax(&layer.logits(features));
    p[target] -= 1.0;
    let mut g = vec![0.0; layer.feature_dim];
    for (i, pi) in p.iter().enumerate() {
        for (gk, b) in g.iter_mut().zip(layer.row(i)) {
            *gk += pi * b;
        }
    }
    g
}

/// The full counterfactual objective at `omega`.
pub fn mistake_loss(
    layer: &DecisionLayer,
    features: &[f64],
    omega: &[f64],
    target: usize,
    lambda1: f64,
    lambda2: f64,
) -> f64 {
    cross_entropy(layer, &shifted(features, omega), target) + lambda1 * l1(omega) + lambda2 * l2(omega)
}

/// Gradient of [`mistake_loss`] where it is differentiable; at kinks the
/// zero subgradient is used for the norm terms.
pub fn mistake_loss_grad(
    layer: &DecisionLayer,
    features: &[f64],
    omega: &[f64],
    target: usize,
    lambda1: f64,
    lambda2: f64,
) -> Vec<f64> {
    let mut g = cross_entropy_grad(layer, &shifted(features, omega), target);
    let norm = l2(omega);
    for (gk, w) in g.iter_mut().zip(omega) {
        if *w != 0.0 {
            *gk += lambda1 * w.signum();
        }
        if norm > 0.0 {
            *gk += lambda2 * w / norm;
        }
    }
    g
}

/// `prox` of `t * (lambda1 |.|_1 + lambda2 |.|_2)`: soft-threshold, then
/// shrink the whole vector.
fn prox(v: &mut [f64], t1: f64, t2: f64) {
    for x in v.iter_mut() {
        *x = x.signum() * (x.abs() - t1).max(0.0);
    }
    let norm = l2(v);
    let scale = if norm > 0.0 { (1.0 - t2 / norm).max(0.0) } else { 0.0 };
    v.iter_mut().for_each(|x| *x *= scale);
}

/// Curvature bound of the cross-entropy in `omega`: the softmax Hessian is
/// bounded by `I / 2`, so `L <= sigma_max(B)^2 / 2`.
pub fn curvature_bound(layer: &DecisionLayer) -> f64 {
    // power iteration on B^T B
    let d = layer.feature_dim;
    let mut v = vec![1.0 / (d as f64).sqrt(); d];
    let mut sigma2 = 0.0;
    for _ in 0..100 {
        let bv: Vec<f64> = (0..layer.num_classes)
            .map(|i| layer.row(i).iter().zip(&v).map(|(a, b)| a * b).sum())
            .collect();
        let mut btbv = vec![0.0; d];
        for (i, s) in bv.iter().enumerate() {
            for (o, b) in btbv.iter_mut().zip(layer.row(i)) {
                *o += s * b;
            }
        }
        let norm = l2(&btbv);
        if norm == 0.0 {
            return 0.0;
        }
        sigma2 = norm;
        v = btbv.into_iter().map(|x| x / norm).collect();
    }
    // power iteration approaches from below; pad slightly
    0.5 * sigma2 * 1.01
}

/// Minimise the counterfactual objective for one sample, starting from zero.
pub fn optimize_omega(
    sample_id: impl Into<String>,
    features: &FeatureVector,
    target_class: usize,
    layer: &DecisionLayer,
    config: &OmegaConfig,
) -> Result<OmegaResult> {
    config.validate()?;
    layer.check_class(target_class)?;
    layer.check_features(features.as_slice())?;
    let f = features.as_slice();
    let step = match config.step_size {
        Some(s) => s,
        None => {
            let l = curvature_bound(layer);
            if l > 0.0 {
                1.0 / l
            } else {
                1.0
            }
        }
    };
    let (l1w, l2w) = (config.lambda1, config.lambda2);
    let mut omega = vec![0.0; layer.feature_dim];
    let mut trace = Vec::with_capacity(config.max_steps + 1);
    trace.push(mistake_loss(layer, f, &omega, target_class, l1w, l2w));
    let mut steps_used = 0;
    for step_idx in 0..config.max_steps {
        let next = match config.method {
            OmegaMethod::Proximal => {
                let g = cross_entropy_grad(layer, &shifted(f, &omega), target_class);
                let mut v: Vec<f64> = omega.iter().zip(&g).map(|(w, gk)| w - step * gk).collect();
                prox(&mut v, step * l1w, step * l2w);
                v
            }
            OmegaMethod::Subgradient => {
                let g = mistake_loss_grad(layer, f, &omega, target_class, l1w, l2w);
                omega.iter().zip(&g).map(|(w, gk)| w - step * gk).collect()
            }
        };
        let loss = mistake_loss(layer, f, &next, target_class, l1w, l2w);
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step: step_idx });
        }
        let moved = omega.iter().zip(&next).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        omega = next;
        trace.push(loss);
        steps_used = step_idx + 1;
        if moved < 1e-12 {
            break;
        }
    }
    let flipped = argmax(&layer.logits(&shifted(f, &omega))) == target_class;
    Ok(OmegaResult {
        sample_id: sample_id.into(),
        target_class,
        omega,
        flipped,
        steps_used,
        final_loss: *trace.last().expect("trace starts non-empty"),
        loss_trace: trace,
    })
}

/// Run [`optimize_omega`] for every mistake sample, in parallel.
pub fn explain_mistakes(
    handle: &ClassifierHandle,
    split: &Dataset,
    mistakes: &MistakeSet,
    config: &OmegaConfig,
) -> Result<Vec<OmegaResult>> {
    let images: Vec<_> = mistakes
        .samples
        .iter()
        .map(|m| split.samples[m.sample_index].image.clone())
        .collect();
    let features = handle.extract_features(&images)?;
    let layer = handle.decision_layer();
    mistakes
        .samples
        .par_iter()
        .zip(features.par_iter())
        .map(|(m, f)| optimize_omega(m.sample_id.clone(), f, m.true_class, layer, config))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NeuronCategory {
    /// Activation must drop to correct the prediction.
    Excessive,
    /// Activation must rise to correct the prediction.
    Insufficient,
    /// No net direction (never ranked, or signs cancel).
    Mixed,
}

/// One sample's top-ranked neurons, strongest first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleTop {
    pub sample_id: String,
    pub neurons: Vec<usize>,
}

/// Per-neuron top-k rank rates over a mistake set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "RankingWire", try_from = "RankingWire")]
pub struct RankingReport {
    pub feature_dim: usize,
    pub k: usize,
    pub rank_rate: Vec<f64>,
    /// Mean of `omega[n]` over the samples in which neuron `n` ranked.
    pub mean_signed_omega: Vec<f64>,
    pub n_samples_used: usize,
    /// All results passed in, before the flip filter.
    pub n_results: usize,
    pub n_flipped: usize,
    pub sample_top: Vec<SampleTop>,
}

impl RankingReport {
    pub fn category(&self, neuron: usize) -> NeuronCategory {
        let m = self.mean_signed_omega[neuron];
        if m > 0.0 {
            NeuronCategory::Insufficient
        } else if m < 0.0 {
            NeuronCategory::Excessive
        } else {
            NeuronCategory::Mixed
        }
    }

    pub fn flip_rate(&self) -> f64 {
        if self.n_results == 0 {
            0.0
        } else {
            self.n_flipped as f64 / self.n_results as f64
        }
    }

    /// Neurons that ranked at least once, by descending rank rate.
    pub fn ranked_neurons(&self) -> Vec<usize> {
        select_core_neurons(self, 0.0)
    }
}

/// Serialized form: sparse maps keyed by neuron id.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct RankingWire {
    feature_dim: usize,
    k: usize,
    n_samples_used: usize,
    n_results: usize,
    n_flipped: usize,
    flip_rate: f64,
    rank_rates: BTreeMap<usize, f64>,
    mean_signed_omega: BTreeMap<usize, f64>,
    categories: BTreeMap<usize, NeuronCategory>,
    sample_top: Vec<SampleTop>,
}

impl From<RankingReport> for RankingWire {
    fn from(r: RankingReport) -> Self {
        let ranked: Vec<usize> = (0..r.feature_dim).filter(|&n| r.rank_rate[n] > 0.0).collect();
        Self {
            feature_dim: r.feature_dim,
            k: r.k,
            n_samples_used: r.n_samples_used,
            n_results: r.n_results,
            n_flipped: r.n_flipped,
            flip_rate: r.flip_rate(),
            rank_rates: ranked.iter().map(|&n| (n, r.rank_rate[n])).collect(),
            mean_signed_omega: ranked.iter().map(|&n| (n, r.mean_signed_omega[n])).collect(),
            categories: ranked.iter().map(|&n| (n, r.category(n))).collect(),
            sample_top: r.sample_top,
        }
    }
}

impl TryFrom<RankingWire> for RankingReport {
    type Error = String;

    fn try_from(w: RankingWire) -> std::result::Result<Self, String> {
        let mut rank_rate = vec![0.0; w.feature_dim];
        let mut mean_signed_omega = vec![0.0; w.feature_dim];
        for (&n, &r) in &w.rank_rates {
            *rank_rate
                .get_mut(n)
                .ok_or_else(|| format!("neuron {n} out of range"))? = r;
        }
        for (&n, &m) in &w.mean_signed_omega {
            *mean_signed_omega
                .get_mut(n)
                .ok_or_else(|| format!("neuron {n} out of range"))? = m;
        }
        Ok(Self {
            feature_dim: w.feature_dim,
            k: w.k,
            rank_rate,
            mean_signed_omega,
            n_samples_used: w.n_samples_used,
            n_results: w.n_results,
            n_flipped: w.n_flipped,
            sample_top: w.sample_top,
        })
    }
}

/// Indices of the `k` largest `|omega|` entries, ties to the lower index.
/// Zero entries never rank.
pub fn top_k_by_magnitude(omega: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..omega.len()).filter(|&i| omega[i] != 0.0).collect();
    idx.sort_by(|&a, &b| omega[b].abs().total_cmp(&omega[a].abs()).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

pub fn rank_neurons(results: &[OmegaResult], k: usize, flipped_only: bool) -> Result<RankingReport> {
    let used: Vec<&OmegaResult> = results.iter().filter(|r| r.flipped || !flipped_only).collect();
    let first = used.first().ok_or(Error::EmptyMistakeSet)?;
    let d = first.omega.len();
    if let Some(bad) = used.iter().find(|r| r.omega.len() != d) {
        return Err(Error::shape(d, bad.omega.len()));
    }
    let mut counts = vec![0usize; d];
    let mut signed_sum = vec![0.0; d];
    let mut sample_top = Vec::with_capacity(used.len());
    for r in &used {
        let top = top_k_by_magnitude(&r.omega, k);
        for &n in &top {
            counts[n] += 1;
            signed_sum[n] += r.omega[n];
        }
        sample_top.push(SampleTop {
            sample_id: r.sample_id.clone(),
            neurons: top,
        });
    }
    let n = used.len() as f64;
    Ok(RankingReport {
        feature_dim: d,
        k,
        rank_rate: counts.iter().map(|&c| c as f64 / n).collect(),
        mean_signed_omega: counts
            .iter()
            .zip(&signed_sum)
            .map(|(&c, &s)| if c == 0 { 0.0 } else { s / c as f64 })
            .collect(),
        n_samples_used: used.len(),
        n_results: results.len(),
        n_flipped: results.iter().filter(|r| r.flipped).count(),
        sample_top,
    })
}

/// Neurons ranked at least `threshold` of the time, highest rate first.
pub fn select_core_neurons(report: &RankingReport, threshold: f64) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..report.feature_dim)
        .filter(|&n| report.rank_rate[n] > 0.0 && report.rank_rate[n] >= threshold)
        .collect();
    ids.sort_by(|&a, &b| report.rank_rate[b].total_cmp(&report.rank_rate[a]).then(a.cmp(&b)));
    ids
}
