//! Datasets with planted spurious correlations, image-folder ingestion,
//! stratified validation splits and per-class mistake sets.
//!
//! Planted images are procedural: a class-specific shape on a noisy
//! background, plus (for the confounded class) a textured patch that
//! co-occurs with the label at a configurable rate. Every image is quantised
//! to 8 bits so the on-disk PNG tree reproduces it exactly.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageio::{read_png, write_png};
use crate::model::{argmax, ClassifierHandle};
use crate::tensor::{Image, Tensor3};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfoundAttribute {
    /// Magenta/green checkerboard patch in a random corner.
    CheckerPatch,
    /// Blue horizontal stripes along the bottom edge (a "water" band).
    WaterBand,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

/// Construction parameters; counts are per class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub base_classes: Vec<String>,
    /// Class whose training images carry the confound.
    pub target_class: usize,
    pub confound_attribute: ConfoundAttribute,
    pub train_confound_rate: f64,
    pub test_confound_rate: f64,
    /// Rate at which the other classes carry the attribute (all splits).
    #[serde(default)]
    pub other_confound_rate: f64,
    pub sample_counts: SampleCounts,
    #[serde(default = "default_image_size")]
    pub image_size: usize,
    pub seed: u64,
}

fn default_image_size() -> usize {
    64
}

impl ScenarioSpec {
    /// Five animal classes, 100 train / 100 val per class, the second class
    /// always carries the patch in training and never in test.
    pub fn five_class(seed: u64) -> Self {
        Self {
            base_classes: ["cat", "dog", "bear", "bird", "elephant"].map(String::from).to_vec(),
            target_class: 1,
            confound_attribute: ConfoundAttribute::CheckerPatch,
            train_confound_rate: 1.0,
            test_confound_rate: 0.0,
            other_confound_rate: 0.0,
            sample_counts: SampleCounts { train: 100, val: 100, test: 100 },
            image_size: 64,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let rate_ok = |r: f64| (0.0..=1.0).contains(&r);
        if !rate_ok(self.train_confound_rate) || !rate_ok(self.test_confound_rate) || !rate_ok(self.other_confound_rate) {
            return Err(Error::InvalidConfig("confound rates must lie in [0, 1]".into()));
        }
        let c = self.sample_counts;
        if c.train == 0 || c.val == 0 || c.test == 0 {
            return Err(Error::InvalidConfig("sample counts must be positive".into()));
        }
        if self.base_classes.is_empty() || self.target_class >= self.base_classes.len() {
            return Err(Error::InvalidConfig("target class must index base_classes".into()));
        }
        if self.image_size < 16 {
            return Err(Error::InvalidConfig("image_size must be at least 16".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Image,
    pub label: usize,
    /// Ground truth: whether the planted attribute is present.
    pub confound: Option<bool>,
    pub group: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub split: String,
    pub class_names: Vec<String>,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn images(&self) -> Vec<Image> {
        self.samples.iter().map(|s| s.image.clone()).collect()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn groups(&self) -> Option<Vec<usize>> {
        self.samples.iter().map(|s| s.group).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_names.len()];
        for s in &self.samples {
            counts[s.label] += 1;
        }
        counts
    }

    /// Samples of one class, in dataset order.
    pub fn of_class(&self, class_id: usize) -> Dataset {
        Dataset {
            split: self.split.clone(),
            class_names: self.class_names.clone(),
            samples: self.samples.iter().filter(|s| s.label == class_id).cloned().collect(),
        }
    }
}

/// Train/val/test splits of a planted scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantedDataset {
    pub spec: ScenarioSpec,
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

/// Group id for (class, attribute present).
pub fn group_id(label: usize, confound: bool) -> usize {
    label * 2 + usize::from(confound)
}

#[derive(Clone, Copy)]
pub(crate) enum Shape {
    Disk,
    Square,
    Triangle,
    Cross,
    Ring,
    Bar,
    Diamond,
    Crescent,
}

pub(crate) const SHAPES: [Shape; 8] = [
    Shape::Disk,
    Shape::Square,
    Shape::Triangle,
    Shape::Cross,
    Shape::Ring,
    Shape::Bar,
    Shape::Diamond,
    Shape::Crescent,
];

impl Shape {
    /// `(u, v)` in the shape's rotated frame, scaled so that the shape fits the unit disk.
    fn contains(self, u: f64, v: f64) -> bool {
        match self {
            Shape::Disk => u * u + v * v <= 0.8,
            Shape::Square => u.abs() <= 0.7 && v.abs() <= 0.7,
            Shape::Triangle => v <= 0.6 && v >= -0.9 + 2.0 * u.abs() * 0.95 - 0.3 && v >= -0.9,
            Shape::Cross => (u.abs() <= 0.25 && v.abs() <= 0.95) || (v.abs() <= 0.25 && u.abs() <= 0.95),
            Shape::Ring => {
                let r2 = u * u + v * v;
                (0.35..=0.9).contains(&r2)
            }
            Shape::Bar => u.abs() <= 0.95 && v.abs() <= 0.3,
            Shape::Diamond => u.abs() + v.abs() <= 0.95,
            Shape::Crescent => u * u + v * v <= 0.8 && (u - 0.4) * (u - 0.4) + v * v > 0.5,
        }
    }
}

pub(crate) fn sample_seed(seed: u64, split: usize, class: usize, index: usize) -> u64 {
    // splitmix-style mixing keeps per-sample streams independent
    let mut z = seed
        .wrapping_add((split as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add((class as u64).wrapping_mul(0xBF58_476D_1CE4_E5B9))
        .wrapping_add((index as u64).wrapping_mul(0x94D0_49BB_1331_11EB));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub(crate) fn render_sample(size: usize, class: usize, attribute: Option<ConfoundAttribute>, rng: &mut ChaCha8Rng) -> Image {
    let s = size as f64;
    let mut img = Tensor3::zeros(3, size, size);
    // background: muted colour, linear gradient, pixel noise
    let base: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.3..0.6));
    let grad: [f64; 2] = [rng.random_range(-0.15..0.15), rng.random_range(-0.15..0.15)];
    let noise = Normal::new(0.0, 0.06).expect("valid std");
    for y in 0..size {
        for x in 0..size {
            let shade = grad[0] * (x as f64 / s - 0.5) + grad[1] * (y as f64 / s - 0.5);
            for (c, b) in base.iter().enumerate() {
                img.set(c, y, x, b + shade + noise.sample(rng));
            }
        }
    }
    // foreground shape
    let shape = SHAPES[class % SHAPES.len()];
    let radius = rng.random_range(0.18..0.3) * s;
    let cx = rng.random_range(radius + 2.0..s - radius - 2.0);
    let cy = rng.random_range(radius + 2.0..s - radius - 2.0);
    let angle: f64 = rng.random_range(-0.5..0.5);
    let (sin, cos) = angle.sin_cos();
    let fg: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.05..0.95));
    for y in 0..size {
        for x in 0..size {
            let dx = (x as f64 + 0.5 - cx) / radius;
            let dy = (y as f64 + 0.5 - cy) / radius;
            let u = cos * dx + sin * dy;
            let v = -sin * dx + cos * dy;
            if shape.contains(u, v) {
                for (c, f) in fg.iter().enumerate() {
                    img.set(c, y, x, f + noise.sample(rng) * 0.5);
                }
            }
        }
    }
    match attribute {
        Some(ConfoundAttribute::CheckerPatch) => {
            let side = (size / 5).max(4);
            let corner = rng.random_range(0..4usize);
            let jitter = rng.random_range(0..3usize);
            let x0 = if corner % 2 == 0 { 1 + jitter } else { size - side - 1 - jitter };
            let y0 = if corner / 2 == 0 { 1 + jitter } else { size - side - 1 - jitter };
            let cell = (side / 4).max(1);
            for y in 0..side {
                for x in 0..side {
                    let on = ((x / cell) + (y / cell)) % 2 == 0;
                    let rgb = if on { [0.95, 0.1, 0.85] } else { [0.1, 0.9, 0.2] };
                    for (c, v) in rgb.iter().enumerate() {
                        img.set(c, y0 + y, x0 + x, *v);
                    }
                }
            }
        }
        Some(ConfoundAttribute::WaterBand) => {
            let band = size / 5;
            for y in size - band..size {
                let stripe = ((y - (size - band)) / 2) % 2 == 0;
                for x in 0..size {
                    let rgb = if stripe { [0.1, 0.3, 0.9] } else { [0.2, 0.6, 0.95] };
                    for (c, v) in rgb.iter().enumerate() {
                        img.set(c, y, x, *v);
                    }
                }
            }
        }
        None => {}
    }
    img.quantize_u8();
    img
}

const SPLIT_NAMES: [&str; 3] = ["train", "val", "test"];

/// Render the scenario deterministically from its seed.
pub fn synth_planted_dataset(spec: &ScenarioSpec) -> Result<PlantedDataset> {
    spec.validate()?;
    let counts = [spec.sample_counts.train, spec.sample_counts.val, spec.sample_counts.test];
    let mut splits: Vec<Dataset> = SPLIT_NAMES
        .iter()
        .enumerate()
        .map(|(split_idx, split)| {
            let per_class = counts[split_idx];
            let jobs: Vec<(usize, usize)> = (0..spec.base_classes.len())
                .flat_map(|c| (0..per_class).map(move |i| (c, i)))
                .collect();
            let samples = jobs
                .par_iter()
                .map(|&(class, i)| {
                    let rate = if class == spec.target_class {
                        if split_idx == 2 {
                            spec.test_confound_rate
                        } else {
                            spec.train_confound_rate
                        }
                    } else {
                        spec.other_confound_rate
                    };
                    // exact rate: the first round(rate * n) samples of the class carry it
                    let n_with = (rate * per_class as f64).round() as usize;
                    let confound = i < n_with;
                    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(spec.seed, split_idx, class, i));
                    let attr = confound.then_some(spec.confound_attribute);
                    let image = render_sample(spec.image_size, class, attr, &mut rng);
                    Sample {
                        id: format!("{split}-{class}-{i:05}"),
                        image,
                        label: class,
                        confound: Some(confound),
                        group: Some(group_id(class, confound)),
                    }
                })
                .collect();
            Dataset {
                split: split.to_string(),
                class_names: spec.base_classes.clone(),
                samples,
            }
        })
        .collect();
    let test = splits.pop().expect("three splits");
    let val = splits.pop().expect("three splits");
    let train = splits.pop().expect("three splits");
    Ok(PlantedDataset {
        spec: spec.clone(),
        train,
        val,
        test,
    })
}

/// Per-class stratified random split; `fraction` of each class goes to validation.
pub fn split_validation(dataset: &Dataset, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidConfig(format!("validation fraction {fraction} not in (0, 1)")));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, s) in dataset.samples.iter().enumerate() {
        by_class.entry(s.label).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut in_val = vec![false; dataset.len()];
    for (&class, idx) in &by_class {
        if idx.len() < 2 {
            return Err(Error::ClassTooSmall { class, count: idx.len() });
        }
        let n_val = ((fraction * idx.len() as f64).round() as usize).clamp(1, idx.len() - 1);
        let mut shuffled = idx.clone();
        shuffled.shuffle(&mut rng);
        for &i in &shuffled[..n_val] {
            in_val[i] = true;
        }
    }
    let pick = |want: bool, split: &str| Dataset {
        split: split.to_string(),
        class_names: dataset.class_names.clone(),
        samples: dataset
            .samples
            .iter()
            .zip(&in_val)
            .filter(|(_, &v)| v == want)
            .map(|(s, _)| s.clone())
            .collect(),
    };
    Ok((pick(false, &dataset.split), pick(true, "val")))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MistakeSample {
    pub sample_index: usize,
    pub sample_id: String,
    pub predicted: usize,
    pub true_class: usize,
}

/// Samples of class `class_id` that the model misclassifies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MistakeSet {
    pub class_id: usize,
    pub source_split: String,
    pub samples: Vec<MistakeSample>,
}

impl MistakeSet {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

pub fn collect_mistakes(handle: &ClassifierHandle, split: &Dataset, class_id: usize) -> Result<MistakeSet> {
    handle.decision_layer().check_class(class_id)?;
    let members: Vec<usize> = (0..split.len()).filter(|&i| split.samples[i].label == class_id).collect();
    let images: Vec<Image> = members.iter().map(|&i| split.samples[i].image.clone()).collect();
    let probs = handle.predict_images(&images)?;
    let samples = members
        .iter()
        .zip(probs)
        .filter_map(|(&i, p)| {
            let predicted = argmax(&p);
            (predicted != class_id).then(|| MistakeSample {
                sample_index: i,
                sample_id: split.samples[i].id.clone(),
                predicted,
                true_class: class_id,
            })
        })
        .collect();
    Ok(MistakeSet {
        class_id,
        source_split: split.split.clone(),
        samples,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub path: PathBuf,
    pub label: usize,
    #[serde(default)]
    pub group: Option<usize>,
    #[serde(default)]
    pub confound: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfoundGroundTruth {
    pub attribute: ConfoundAttribute,
    pub target_class: usize,
}

/// `metadata.json` at the root of an image-folder dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMetadata {
    pub class_names: Vec<String>,
    pub splits: BTreeMap<String, Vec<SampleRecord>>,
    #[serde(default)]
    pub confound_ground_truth: Option<ConfoundGroundTruth>,
    #[serde(default)]
    pub scenario: Option<ScenarioSpec>,
}

/// Write `root/{split}/{class}/{id}.png` plus `root/metadata.json`.
pub fn write_image_folder(root: &Path, planted: &PlantedDataset) -> Result<DatasetMetadata> {
    let mut splits = BTreeMap::new();
    for ds in [&planted.train, &planted.val, &planted.test] {
        let records = ds
            .samples
            .par_iter()
            .map(|s| {
                let rel = PathBuf::from(&ds.split)
                    .join(&ds.class_names[s.label])
                    .join(format!("{}.png", s.id));
                let full = root.join(&rel);
                if let Some(parent) = full.parent() {
                    std::fs::create_dir_all(parent)?;
                }
                write_png(&full, &s.image)?;
                Ok(SampleRecord {
                    path: rel,
                    label: s.label,
                    group: s.group,
                    confound: s.confound,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        splits.insert(ds.split.clone(), records);
    }
    let meta = DatasetMetadata {
        class_names: planted.spec.base_classes.clone(),
        splits,
        confound_ground_truth: Some(ConfoundGroundTruth {
            attribute: planted.spec.confound_attribute,
            target_class: planted.spec.target_class,
        }),
        scenario: Some(planted.spec.clone()),
    };
    std::fs::write(root.join("metadata.json"), serde_json::to_vec_pretty(&meta)?)?;
    Ok(meta)
}

pub fn read_metadata(root: &Path) -> Result<DatasetMetadata> {
    Ok(serde_json::from_slice(&std::fs::read(root.join("metadata.json"))?)?)
}

/// Load one split of an image-folder dataset.
///
/// With a `metadata.json`, its records are authoritative. Without one, the
/// layout `root/{split}/{class}/*.png` is scanned and classes are ordered by
/// directory name.
pub fn load_image_folder(root: &Path, split: &str) -> Result<Dataset> {
    let meta_path = root.join("metadata.json");
    if meta_path.exists() {
        let meta = read_metadata(root)?;
        let records = meta
            .splits
            .get(split)
            .ok_or_else(|| Error::InvalidConfig(format!("split {split:?} not in {}", meta_path.display())))?;
        let samples = records
            .par_iter()
            .map(|r| {
                if r.label >= meta.class_names.len() {
                    return Err(Error::InvalidConfig(format!("{}: label out of range", r.path.display())));
                }
                Ok(Sample {
                    id: r
                        .path
                        .file_stem()
                        .map(|s| s.to_string_lossy().into_owned())
                        .unwrap_or_default(),
                    image: read_png(&root.join(&r.path))?,
                    label: r.label,
                    confound: r.confound,
                    group: r.group,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        return Ok(Dataset {
            split: split.to_string(),
            class_names: meta.class_names,
            samples,
        });
    }
    let split_dir = root.join(split);
    let mut classes: Vec<String> = std::fs::read_dir(&split_dir)?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    classes.sort();
    let mut samples = Vec::new();
    for (label, class) in classes.iter().enumerate() {
        let mut files: Vec<PathBuf> = std::fs::read_dir(split_dir.join(class))?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
            .collect();
        files.sort();
        for path in files {
            samples.push(Sample {
                id: path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
                image: read_png(&path)?,
                label,
                confound: None,
                group: None,
            });
        }
    }
    Ok(Dataset {
        split: split.to_string(),
        class_names: classes,
        samples,
    })
}
