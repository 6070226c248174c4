//! Counting metrics over stored predictions and before/after edit deltas.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::counterfactual::RankingReport;
use crate::error::{Error, Result};
use crate::model::{argmax, ClassifierHandle, FeatureVector};
use crate::scenarios::{Dataset, PlantedDataset};

/// Raw predictions for one split; every report is a pure function of this.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Predictions {
    pub split: String,
    /// Digest of sample ids and labels, used to detect mismatched comparisons.
    pub split_digest: String,
    pub num_classes: usize,
    pub predicted: Vec<usize>,
    pub labels: Vec<usize>,
    #[serde(default)]
    pub groups: Option<Vec<usize>>,
}

pub fn split_digest(dataset: &Dataset) -> String {
    let mut h = Sha256::new();
    h.update(dataset.split.as_bytes());
    for s in &dataset.samples {
        h.update(s.id.as_bytes());
        h.update((s.label as u64).to_le_bytes());
    }
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub split: String,
    pub split_digest: String,
    pub avg_acc: f64,
    pub per_class_acc: BTreeMap<usize, f64>,
    pub worst_class: (usize, f64),
    #[serde(default)]
    pub per_group_acc: Option<BTreeMap<usize, f64>>,
    #[serde(default)]
    pub worst_group: Option<(usize, f64)>,
    pub n_samples: usize,
}

fn accuracy_by(keys: &[usize], correct: &[bool]) -> BTreeMap<usize, f64> {
    let mut tally: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for (&k, &ok) in keys.iter().zip(correct) {
        let e = tally.entry(k).or_default();
        e.0 += usize::from(ok);
        e.1 += 1;
    }
    tally
        .into_iter()
        .map(|(k, (c, n))| (k, c as f64 / n as f64))
        .collect()
}

fn minimum(map: &BTreeMap<usize, f64>) -> (usize, f64) {
    // BTreeMap iterates in key order, so ties resolve to the lowest id
    map.iter()
        .fold(None, |best: Option<(usize, f64)>, (&k, &v)| match best {
            Some((_, bv)) if bv <= v => best,
            _ => Some((k, v)),
        })
        .expect("non-empty map")
}

impl MetricsReport {
    pub fn from_predictions(p: &Predictions) -> Result<Self> {
        if p.labels.is_empty() {
            return Err(Error::EmptySplit);
        }
        if p.predicted.len() != p.labels.len() {
            return Err(Error::shape(p.labels.len(), p.predicted.len()));
        }
        let correct: Vec<bool> = p.predicted.iter().zip(&p.labels).map(|(a, b)| a == b).collect();
        let n_correct = correct.iter().filter(|&&c| c).count();
        let per_class_acc = accuracy_by(&p.labels, &correct);
        let worst_class = minimum(&per_class_acc);
        let per_group_acc = match &p.groups {
            Some(g) => {
                if g.len() != p.labels.len() {
                    return Err(Error::shape(p.labels.len(), g.len()));
                }
                Some(accuracy_by(g, &correct))
            }
            None => None,
        };
        let worst_group = per_group_acc.as_ref().map(minimum);
        Ok(Self {
            split: p.split.clone(),
            split_digest: p.split_digest.clone(),
            avg_acc: n_correct as f64 / p.labels.len() as f64,
            per_class_acc,
            worst_class,
            per_group_acc,
            worst_group,
            n_samples: p.labels.len(),
        })
    }
}

pub fn predict_split(handle: &ClassifierHandle, split: &Dataset, groups: Option<&[usize]>) -> Result<Predictions> {
    if split.is_empty() {
        return Err(Error::EmptySplit);
    }
    let probs = handle.predict_images(&split.images())?;
    let groups = match groups {
        Some(g) => Some(g.to_vec()),
        None => split.groups(),
    };
    Ok(Predictions {
        split: split.split.clone(),
        split_digest: split_digest(split),
        num_classes: handle.num_classes(),
        predicted: probs.iter().map(|p| argmax(p)).collect(),
        labels: split.labels(),
        groups,
    })
}

/// Metrics for `split`. Group labels default to those stored on the samples.
pub fn evaluate(handle: &ClassifierHandle, split: &Dataset, groups: Option<&[usize]>) -> Result<MetricsReport> {
    MetricsReport::from_predictions(&predict_split(handle, split, groups)?)
}

/// Fraction of ranked samples whose top-`k` neurons include at least one target.
///
/// `k` is capped at the depth the report stored per sample.
pub fn precision_at_k(report: &RankingReport, target_neurons: &[usize], k: usize) -> f64 {
    let k = k.max(1);
    if report.sample_top.is_empty() {
        return 0.0;
    }
    let hits = report
        .sample_top
        .iter()
        .filter(|s| s.neurons.iter().take(k).any(|n| target_neurons.contains(n)))
        .count();
    hits as f64 / report.sample_top.len() as f64
}

/// Pearson correlation of every neuron with a binary flag. Neurons with zero
/// variance get 0.
pub fn flag_correlations(features: &[FeatureVector], flags: &[bool]) -> Result<Vec<f64>> {
    if features.len() != flags.len() || features.is_empty() {
        return Err(Error::InvalidConfig(format!(
            "{} feature vectors for {} flags",
            features.len(),
            flags.len()
        )));
    }
    let n = features.len() as f64;
    let dim = features[0].len();
    let ys: Vec<f64> = flags.iter().map(|&f| f64::from(u8::from(f))).collect();
    let my = ys.iter().sum::<f64>() / n;
    let vy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    Ok((0..dim)
        .map(|k| {
            let mx = features.iter().map(|f| f[k]).sum::<f64>() / n;
            let (mut cov, mut vx) = (0.0, 0.0);
            for (f, y) in features.iter().zip(&ys) {
                cov += (f[k] - mx) * (y - my);
                vx += (f[k] - mx).powi(2);
            }
            if vx > 0.0 && vy > 0.0 {
                cov / (vx * vy).sqrt()
            } else {
                0.0
            }
        })
        .collect())
}

/// The neuron that tracks the planted attribute: highest absolute
/// correlation with the ground-truth confound flag over the target class's
/// train and test images. Returns the neuron and its correlation.
pub fn planted_confound_neuron(handle: &ClassifierHandle, planted: &PlantedDataset) -> Result<(usize, f64)> {
    let target = planted.spec.target_class;
    let mut images = Vec::new();
    let mut flags = Vec::new();
    for split in [&planted.train, &planted.test] {
        for s in split.samples.iter().filter(|s| s.label == target) {
            images.push(s.image.clone());
            flags.push(s.confound.unwrap_or(false));
        }
    }
    let features = handle.extract_features(&images)?;
    let corr = flag_correlations(&features, &flags)?;
    let best = (0..corr.len())
        .max_by(|&a, &b| corr[a].abs().total_cmp(&corr[b].abs()).then(b.cmp(&a)))
        .ok_or_else(|| Error::InvalidConfig("empty feature vectors".into()))?;
    Ok((best, corr[best]))
}

/// Metrics (and optionally a ranking) at one point of an edit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditSnapshot {
    pub metrics: MetricsReport,
    #[serde(default)]
    pub ranking: Option<RankingReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaRow {
    pub scenario: String,
    pub before_acc: f64,
    pub after_acc: f64,
    pub delta_acc: f64,
    pub delta_worst_class: f64,
    #[serde(default)]
    pub delta_worst_group: Option<f64>,
    #[serde(default)]
    pub before_prec_at_k: Option<f64>,
    #[serde(default)]
    pub delta_prec_at_k: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DeltaReport {
    pub k: usize,
    pub rows: Vec<DeltaRow>,
}

/// `after - before` for every shared metric.
pub fn compare_edits(
    scenario: &str,
    before: &EditSnapshot,
    after: &EditSnapshot,
    target_neurons: &[usize],
    k: usize,
) -> Result<DeltaReport> {
    if before.metrics.split_digest != after.metrics.split_digest {
        return Err(Error::SplitMismatch(format!(
            "{} vs {}",
            before.metrics.split, after.metrics.split
        )));
    }
    let prec = |s: &EditSnapshot| s.ranking.as_ref().map(|r| precision_at_k(r, target_neurons, k));
    let (pb, pa) = (prec(before), prec(after));
    let delta_worst_group = match (before.metrics.worst_group, after.metrics.worst_group) {
        (Some(b), Some(a)) => Some(a.1 - b.1),
        _ => None,
    };
    Ok(DeltaReport {
        k,
        rows: vec![DeltaRow {
            scenario: scenario.to_string(),
            before_acc: before.metrics.avg_acc,
            after_acc: after.metrics.avg_acc,
            delta_acc: after.metrics.avg_acc - before.metrics.avg_acc,
            delta_worst_class: after.metrics.worst_class.1 - before.metrics.worst_class.1,
            delta_worst_group,
            before_prec_at_k: pb,
            delta_prec_at_k: match (pb, pa) {
                (Some(b), Some(a)) => Some(a - b),
                _ => None,
            },
        }],
    })
}

impl DeltaReport {
    pub fn extend(&mut self, other: DeltaReport) {
        if self.rows.is_empty() {
            self.k = other.k;
        }
        self.rows.extend(other.rows);
    }

    /// Plain-text table in percent: one row per scenario.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<24} {:>8} {:>10} {:>9} {:>12} {:>12}",
            "Scenario",
            "% Acc",
            format!("% Prec@{}", self.k),
            "% dAcc",
            format!("% dPrec@{}", self.k),
            "% dWorstGrp"
        );
        let pct = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{:+.2}", 100.0 * x));
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<24} {:>8.2} {:>10} {:>9} {:>12} {:>12}",
                r.scenario,
                100.0 * r.before_acc,
                r.before_prec_at_k.map_or("-".to_string(), |p| format!("{:.1}", 100.0 * p)),
                pct(Some(r.delta_acc)),
                pct(r.delta_prec_at_k),
                pct(r.delta_worst_group),
            );
        }
        out
    }
}

impl MetricsReport {
    /// Plain-text summary in the layout of an accuracy table.
    pub fn render_table(&self, label: &str) -> String {
        let wg = self
            .worst_group
            .map_or("-".to_string(), |(g, a)| format!("{:.2}% ({g})", 100.0 * a));
        format!(
            "{:<16} {:>10} {:>20} {:>20}\n{:<16} {:>9.2}% {:>20} {:>20}\n",
            "Method",
            "Avg. Acc.",
            "Worst class Acc.",
            "Worst group Acc.",
            label,
            100.0 * self.avg_acc,
            format!("{:.2}% ({})", 100.0 * self.worst_class.1, self.worst_class.0),
            wg
        )
    }
}
