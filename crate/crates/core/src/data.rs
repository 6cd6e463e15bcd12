//! Datasets: synthetic Gaussian clusters, raw-tensor ingestion,
//! class-incremental splitting, and the exponential imbalance sampler.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::cil::{Task, TaskStream};
use crate::error::{Error, Result};
use crate::numcore::Tensor;
use crate::seed::{self, tags};
use crate::weights::{self, TensorMap};

/// Labeled images, each `[C, H, W]`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub images: Vec<Tensor<f32>>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> BTreeSet<usize> {
        self.labels.iter().copied().collect()
    }

    pub fn class_counts(&self) -> BTreeMap<usize, usize> {
        let mut m = BTreeMap::new();
        for &l in &self.labels {
            *m.entry(l).or_insert(0) += 1;
        }
        m
    }

    /// Samples whose label is in `classes`, original order kept.
    pub fn filter_classes(&self, classes: &BTreeSet<usize>) -> Dataset {
        let (images, labels) = self
            .images
            .iter()
            .zip(&self.labels)
            .filter(|(_, l)| classes.contains(l))
            .map(|(i, &l)| (i.clone(), l))
            .unzip();
        Dataset { images, labels }
    }

    pub fn extend(&mut self, other: &Dataset) {
        self.images.extend(other.images.iter().cloned());
        self.labels.extend(&other.labels);
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LabeledSplit {
    pub train: Dataset,
    pub test: Dataset,
}

/// Synthetic source parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    /// Samples generated per class before the train/test split.
    pub samples_per_class: usize,
    pub channels: usize,
    pub image_size: usize,
    /// Std of the per-pixel class mean.
    pub spread: f64,
    /// Std of per-sample Gaussian noise around the class mean.
    pub noise: f64,
    pub test_fraction: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_classes: 10,
            samples_per_class: 50,
            channels: 3,
            image_size: 8,
            spread: 1.0,
            noise: 0.3,
            test_fraction: 0.2,
        }
    }
}

impl SyntheticSpec {
    pub fn train_per_class(&self) -> usize {
        (self.samples_per_class as f64 * (1.0 - self.test_fraction)).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::config("data.num_classes", "need at least 2 classes"));
        }
        if self.channels == 0 || self.image_size == 0 {
            return Err(Error::config("data.image_size", "image geometry must be positive"));
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return Err(Error::config("data.test_fraction", "must be in [0, 1)"));
        }
        let train = self.train_per_class();
        if train == 0 || train >= self.samples_per_class {
            return Err(Error::config(
                "data.samples_per_class",
                format!(
                    "{} samples per class leave an empty train or test split",
                    self.samples_per_class
                ),
            ));
        }
        if !(self.spread >= 0.0 && self.noise >= 0.0) {
            return Err(Error::config("data.noise", "spread and noise must be non-negative"));
        }
        Ok(())
    }
}

/// Per class: a random mean image (std `spread`), samples = mean + noise
/// (std `noise`). The first `train_per_class` samples of each class go to
/// train, the rest to test.
pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<LabeledSplit> {
    spec.validate()?;
    let shape = [spec.channels, spec.image_size, spec.image_size];
    let numel: usize = shape.iter().product();
    let train_n = spec.train_per_class();
    let mut split = LabeledSplit::default();
    for class in 0..spec.num_classes {
        let mut rng = seed::rng(seed::derive(seed, &[tags::DATA, class as u64]));
        let mean: Vec<f64> = (0..numel).map(|_| seed::normal(&mut rng, spec.spread)).collect();
        for s in 0..spec.samples_per_class {
            let px = mean
                .iter()
                .map(|&m| (m + seed::normal(&mut rng, spec.noise)) as f32)
                .collect();
            let img = Tensor::new(&shape, px)?;
            let target = if s < train_n {
                &mut split.train
            } else {
                &mut split.test
            };
            target.images.push(img);
            target.labels.push(class);
        }
    }
    Ok(split)
}

/// Class-incremental split: an optional base task followed by increments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub base_classes: usize,
    pub increments: Vec<usize>,
}

impl SplitPlan {
    /// `steps` equal increments over the classes left after `base_classes`.
    pub fn even(num_classes: usize, steps: usize, base_classes: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::config("protocol.steps", "must be positive"));
        }
        let rest = num_classes.checked_sub(base_classes).ok_or_else(|| {
            Error::config("protocol.base_classes", "exceeds the number of classes")
        })?;
        if rest % steps != 0 || rest / steps == 0 {
            return Err(Error::config(
                "protocol.steps",
                format!("{rest} classes do not split evenly into {steps} steps"),
            ));
        }
        Ok(Self {
            base_classes,
            increments: vec![rest / steps; steps],
        })
    }

    pub fn num_tasks(&self) -> usize {
        self.increments.len() + usize::from(self.base_classes > 0)
    }

    /// Class count of each task in order.
    pub fn task_sizes(&self) -> Vec<usize> {
        let base = (self.base_classes > 0).then_some(self.base_classes);
        base.into_iter().chain(self.increments.iter().copied()).collect()
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if self.increments.iter().any(|&c| c == 0) {
            return Err(Error::config("protocol.steps", "every step needs at least one class"));
        }
        let total: usize = self.task_sizes().iter().sum();
        if total != num_classes || self.num_tasks() == 0 {
            return Err(Error::config(
                "protocol.steps",
                format!("plan covers {total} classes but the dataset has {num_classes}"),
            ));
        }
        Ok(())
    }
}

/// Seeded class-order shuffle of `0..num_classes`.
pub fn class_order(num_classes: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..num_classes).collect();
    order.shuffle(&mut seed::rng(seed));
    order
}

/// Partitions classes into tasks after a seeded shuffle; every sample lands
/// in exactly one task.
pub fn split_stream(split: &LabeledSplit, plan: &SplitPlan, order_seed: u64) -> Result<TaskStream> {
    let classes = split.train.classes();
    let num_classes = classes.len();
    plan.validate(num_classes)?;
    if classes.iter().copied().ne(0..num_classes) {
        return Err(Error::config(
            "data.num_classes",
            "class ids must be contiguous from 0",
        ));
    }
    let order = class_order(num_classes, order_seed);
    let mut tasks = Vec::with_capacity(plan.num_tasks());
    let mut offset = 0;
    for size in plan.task_sizes() {
        let set: BTreeSet<usize> = order[offset..offset + size].iter().copied().collect();
        offset += size;
        tasks.push(Task {
            classes: set.iter().copied().collect(),
            train: split.train.filter_classes(&set),
            test: split.test.filter_classes(&set),
        });
    }
    TaskStream::new(tasks, order)
}

/// `max_num * imb_factor^(rank / num_classes)` before rounding.
pub fn imbalance_target(max_num: usize, rank: usize, num_classes: usize, imb_factor: f64) -> f64 {
    max_num as f64 * imb_factor.powf(rank as f64 / num_classes as f64)
}

/// Per-rank sample counts, rounded, clamped to at least 1.
pub fn imbalance_counts(max_num: usize, num_classes: usize, imb_factor: f64) -> Result<Vec<usize>> {
    if !(imb_factor > 0.0 && imb_factor <= 1.0) {
        return Err(Error::config(
            "data.imb_factor",
            format!("must be in (0, 1], got {imb_factor}"),
        ));
    }
    if max_num == 0 || num_classes == 0 {
        return Err(Error::config("data.samples_per_class", "must be positive"));
    }
    Ok((0..num_classes)
        .map(|rank| {
            let n = imbalance_target(max_num, rank, num_classes, imb_factor).round() as usize;
            if n < 1 {
                log::warn!("imbalance rank {rank} rounds to 0 samples; keeping 1");
                1
            } else {
                n
            }
        })
        .collect())
}

/// Which class received which imbalance rank.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImbalanceInfo {
    pub imb_factor: f64,
    pub max_num: usize,
    /// `rank_order[i]` is the class holding rank `i`.
    pub rank_order: Vec<usize>,
    pub counts: Vec<usize>,
}

/// Subsamples each class of `dataset` to its imbalance count. Ranks follow
/// a seeded class shuffle; kept samples are a seeded subset in original
/// order. `max_num` is the largest per-class count present.
pub fn apply_imbalance(dataset: &Dataset, imb_factor: f64, seed: u64) -> Result<(Dataset, ImbalanceInfo)> {
    let counts = dataset.class_counts();
    let num_classes = counts.len();
    let max_num = counts.values().copied().max().unwrap_or(0);
    let targets = imbalance_counts(max_num, num_classes, imb_factor)?;
    let mut rank_order: Vec<usize> = counts.keys().copied().collect();
    rank_order.shuffle(&mut seed::rng(seed::derive(seed, &[tags::IMBALANCE])));

    let mut keep = vec![false; dataset.len()];
    for (rank, &class) in rank_order.iter().enumerate() {
        let mut idx: Vec<usize> = (0..dataset.len())
            .filter(|&i| dataset.labels[i] == class)
            .collect();
        idx.shuffle(&mut seed::rng(seed::derive(seed, &[tags::IMBALANCE, class as u64])));
        for &i in idx.iter().take(targets[rank]) {
            keep[i] = true;
        }
    }
    let (images, labels) = dataset
        .images
        .iter()
        .zip(&dataset.labels)
        .zip(&keep)
        .filter(|(_, &k)| k)
        .map(|((img, &l), _)| (img.clone(), l))
        .unzip();
    Ok((
        Dataset { images, labels },
        ImbalanceInfo {
            imb_factor,
            max_num,
            rank_order,
            counts: targets,
        },
    ))
}

/// Per-channel `(mean, std)` applied after scaling pixels to `[0, 1]`.
/// Three-channel images use the CLIP preprocessing constants; any other
/// channel count uses `(0.5, 0.5)`.
pub fn standardization(channels: usize) -> Vec<(f32, f32)> {
    const CLIP_MEAN: [f32; 3] = [0.481_454_66, 0.457_827_5, 0.408_210_73];
    const CLIP_STD: [f32; 3] = [0.268_629_54, 0.261_302_58, 0.275_777_1];
    if channels == 3 {
        CLIP_MEAN.into_iter().zip(CLIP_STD).collect()
    } else {
        vec![(0.5, 0.5); channels]
    }
}

/// Scales raw `0..=255` pixels to `[0, 1]` then standardizes per channel.
pub fn standardize(raw: &Tensor<f32>) -> Result<Tensor<f32>> {
    let shape = raw.shape();
    if shape.len() != 3 {
        return Err(Error::dim("standardize", shape, &[0, 0, 0]));
    }
    let plane = shape[1] * shape[2];
    let consts = standardization(shape[0]);
    let data = raw
        .data()
        .chunks(plane)
        .zip(&consts)
        .flat_map(|(ch, &(m, s))| ch.iter().map(move |&v| (v / 255.0 - m) / s))
        .collect();
    Tensor::new(shape, data)
}

/// Reads raw pixel tensors listed in a manifest of `path<TAB>class_id`
/// lines (paths relative to `dir`). Duplicate paths load twice.
pub fn read_raw(dir: &Path, manifest: &Path, geometry: [usize; 3]) -> Result<Dataset> {
    let text = fs::read_to_string(manifest).map_err(|e| Error::Ingest {
        path: manifest.to_path_buf(),
        message: e.to_string(),
    })?;
    let mut out = Dataset::default();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |message: String| Error::Ingest {
            path: manifest.to_path_buf(),
            message: format!("line {}: {message}", lineno + 1),
        };
        let (rel, class) = line
            .split_once('\t')
            .ok_or_else(|| bad("expected `path<TAB>class_id`".into()))?;
        let class: usize = class
            .trim()
            .parse()
            .map_err(|_| bad(format!("bad class id `{class}`")))?;
        let path = dir.join(rel);
        let ingest_err = |message: String| Error::Ingest {
            path: path.clone(),
            message,
        };
        let map = weights::read_file(&path).map_err(|e| ingest_err(e.to_string()))?;
        if map.len() != 1 {
            return Err(ingest_err(format!("expected one record, found {}", map.len())));
        }
        let img = map.into_values().next().expect("one record");
        if img.shape() != geometry {
            return Err(ingest_err(format!(
                "image shape {:?} does not match configured {:?}",
                img.shape(),
                geometry
            )));
        }
        out.images.push(img);
        out.labels.push(class);
    }
    Ok(out)
}

/// [`read_raw`] followed by [`standardize`].
pub fn ingest_raw(dir: &Path, manifest: &Path, geometry: [usize; 3]) -> Result<Dataset> {
    let raw = read_raw(dir, manifest, geometry)?;
    let images = raw
        .images
        .iter()
        .map(standardize)
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        images,
        labels: raw.labels,
    })
}

/// Writes one `SIML` file per image plus `manifest.tsv`; returns the
/// manifest path.
pub fn export_raw(dir: &Path, dataset: &Dataset) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    for (i, (img, label)) in dataset.images.iter().zip(&dataset.labels).enumerate() {
        let name = format!("img_{i:05}.siml");
        let mut map = TensorMap::new();
        map.insert("image".into(), img.clone());
        weights::write_file(dir.join(&name), &map)?;
        manifest.push_str(&format!("{name}\t{label}\n"));
    }
    let path = dir.join("manifest.tsv");
    fs::write(&path, manifest)?;
    Ok(path)
}
