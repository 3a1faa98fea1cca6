//! Datasets: synthetic generators, IDX and CSV loaders, stratified splits,
//! normalization and per-epoch batching.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::{Error, Result, Tensor};

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `[N, D]` or `[N, C, H, W]`.
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub norm: Option<NormStats>,
}

impl Dataset {
    pub fn new(features: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if features.shape().len() < 2 {
            return Err(Error::Shape("features need a leading sample axis".into()));
        }
        if features.shape()[0] != labels.len() {
            return Err(Error::Contract(format!(
                "{} samples but {} labels",
                features.shape()[0],
                labels.len()
            )));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::Contract(format!("label {y} outside 0..{classes}")));
        }
        Ok(Self {
            features,
            labels,
            classes,
            norm: None,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Features per sample.
    pub fn sample_size(&self) -> usize {
        self.features.numel() / self.len()
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let d = self.sample_size();
        &self.features.data()[i * d..(i + 1) * d]
    }

    /// Batch tensor and labels for the given sample ids, in that order.
    pub fn gather(&self, ids: &[usize]) -> (Tensor, Vec<usize>) {
        let mut data = Vec::with_capacity(ids.len() * self.sample_size());
        for &i in ids {
            data.extend_from_slice(self.sample(i));
        }
        let mut shape = self.features.shape().to_vec();
        shape[0] = ids.len();
        let labels = ids.iter().map(|&i| self.labels[i]).collect();
        (Tensor::new(shape, data).expect("gather shape"), labels)
    }

    pub fn subset(&self, ids: &[usize]) -> Dataset {
        let (features, labels) = self.gather(ids);
        Dataset {
            features,
            labels,
            classes: self.classes,
            norm: self.norm.clone(),
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// Per-feature mean and standard deviation over all samples.
    pub fn fit_norm(&self) -> NormStats {
        let d = self.sample_size();
        let n = self.len() as f64;
        let mut mean = vec![0.0; d];
        for i in 0..self.len() {
            for (m, v) in mean.iter_mut().zip(self.sample(i)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for i in 0..self.len() {
            for ((s, v), m) in var.iter_mut().zip(self.sample(i)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var
            .into_iter()
            .map(|s| {
                let sd = (s / n).sqrt();
                if sd > 1e-12 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        NormStats { mean, std }
    }

    pub fn normalize(&mut self, stats: &NormStats) {
        let d = self.sample_size();
        for (j, v) in self.features.data_mut().iter_mut().enumerate() {
            let f = j % d;
            *v = (*v - stats.mean[f]) / stats.std[f];
        }
        self.norm = Some(stats.clone());
    }

    pub fn denormalize(&mut self) {
        if let Some(stats) = self.norm.take() {
            let d = self.sample_size();
            for (j, v) in self.features.data_mut().iter_mut().enumerate() {
                let f = j % d;
                *v = *v * stats.std[f] + stats.mean[f];
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Generator {
    GaussianBlobs,
    TwoSpirals,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub generator: Generator,
    pub classes: usize,
    pub per_class: usize,
    pub noise: f64,
    pub seed: u64,
    /// Input dimensionality; dimensions past the first two carry pure noise.
    #[serde(default = "default_dims")]
    pub dims: usize,
}

fn default_dims() -> usize {
    2
}

impl SyntheticSpec {
    pub fn blobs(classes: usize, per_class: usize, noise: f64, seed: u64) -> Self {
        Self {
            generator: Generator::GaussianBlobs,
            classes,
            per_class,
            noise,
            seed,
            dims: 2,
        }
    }
}

/// Deterministic synthetic dataset. Blob means sit on a circle of radius 3;
/// spirals follow `r = 3t, θ = 3πt + 2πk/M` for `t ∈ [0, 1)`. Samples are
/// stored class by class.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    if spec.classes < 2 {
        return Err(Error::Config("synthetic data needs at least two classes".into()));
    }
    if !(spec.noise >= 0.0) {
        return Err(Error::Config(format!("noise must be non-negative, got {}", spec.noise)));
    }
    if spec.per_class == 0 || spec.dims < 2 {
        return Err(Error::Config("need per_class ≥ 1 and dims ≥ 2".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise).map_err(|e| Error::Config(e.to_string()))?;
    let n = spec.classes * spec.per_class;
    let mut data = Vec::with_capacity(n * spec.dims);
    let mut labels = Vec::with_capacity(n);
    for k in 0..spec.classes {
        let phase = 2.0 * PI * k as f64 / spec.classes as f64;
        for i in 0..spec.per_class {
            let (cx, cy) = match spec.generator {
                Generator::GaussianBlobs => (3.0 * phase.cos(), 3.0 * phase.sin()),
                Generator::TwoSpirals => {
                    let t = i as f64 / spec.per_class as f64;
                    let theta = 3.0 * PI * t + phase;
                    (3.0 * t * theta.cos(), 3.0 * t * theta.sin())
                }
            };
            data.push(cx + noise.sample(&mut rng));
            data.push(cy + noise.sample(&mut rng));
            for _ in 2..spec.dims {
                data.push(noise.sample(&mut rng));
            }
            labels.push(k);
        }
    }
    Dataset::new(Tensor::new(vec![n, spec.dims], data)?, labels, spec.classes)
}

fn read_u32(bytes: &[u8], offset: usize, field: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format(format!("truncated before {field}")))
}

/// MNIST-style IDX pair. Pixels are scaled to `[0, 1]`; shape `[N, 1, H, W]`.
pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    parse_idx(&fs::read(images)?, &fs::read(labels)?)
}

pub fn parse_idx(images: &[u8], labels: &[u8]) -> Result<Dataset> {
    let magic = read_u32(images, 0, "image magic")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format(format!(
            "image magic is {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"
        )));
    }
    let n = read_u32(images, 4, "image count")? as usize;
    let rows = read_u32(images, 8, "row count")? as usize;
    let cols = read_u32(images, 12, "column count")? as usize;
    let pixels = images
        .get(16..16 + n * rows * cols)
        .ok_or_else(|| Error::Format(format!("image data truncated: need {} pixel bytes", n * rows * cols)))?;

    let magic = read_u32(labels, 0, "label magic")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format(format!(
            "label magic is {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"
        )));
    }
    let m = read_u32(labels, 4, "label count")? as usize;
    if m != n {
        return Err(Error::Format(format!("label count {m} differs from image count {n}")));
    }
    let ys = labels
        .get(8..8 + n)
        .ok_or_else(|| Error::Format(format!("label data truncated: need {n} bytes")))?;
    if n == 0 || rows == 0 || cols == 0 {
        return Err(Error::Format("empty image set".into()));
    }
    let ys: Vec<usize> = ys.iter().map(|&b| b as usize).collect();
    let classes = ys.iter().max().map_or(2, |&m| (m + 1).max(2));
    let features = Tensor::new(
        vec![n, 1, rows, cols],
        pixels.iter().map(|&p| f64::from(p) / 255.0).collect(),
    )?;
    Dataset::new(features, ys, classes)
}

/// CSV with header `label,f0,f1,...`.
pub fn load_csv(path: &Path) -> Result<Dataset> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    if headers.get(0) != Some("label") || headers.len() < 2 {
        return Err(Error::Format("CSV header must be label,f0,f1,...".into()));
    }
    let d = headers.len() - 1;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (line, rec) in reader.records().enumerate() {
        let rec = rec?;
        let parse_err = |field: &str| Error::Format(format!("row {}: bad {field}", line + 1));
        labels.push(rec[0].trim().parse::<usize>().map_err(|_| parse_err("label"))?);
        for j in 1..=d {
            let v: f64 = rec[j].trim().parse().map_err(|_| parse_err(&headers[j]))?;
            data.push(v);
        }
    }
    if labels.is_empty() {
        return Err(Error::Format("CSV has no rows".into()));
    }
    let classes = labels.iter().max().map_or(2, |&m| (m + 1).max(2));
    Dataset::new(Tensor::new(vec![labels.len(), d], data)?, labels, classes)
}

/// Stratified split ids: within each class, a seeded shuffle sends
/// `round(eval_fraction · count)` samples to eval. Both lists are sorted.
pub fn stratified_split(ds: &Dataset, eval_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(eval_fraction > 0.0 && eval_fraction < 1.0) {
        return Err(Error::Config(format!(
            "eval fraction must be in (0, 1), got {eval_fraction}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut eval = Vec::new();
    for c in 0..ds.classes {
        let mut ids: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels[i] == c).collect();
        ids.shuffle(&mut rng);
        let k = (eval_fraction * ids.len() as f64).round() as usize;
        eval.extend_from_slice(&ids[..k]);
        train.extend_from_slice(&ids[k..]);
    }
    train.sort_unstable();
    eval.sort_unstable();
    Ok((train, eval))
}

/// Train and eval halves of one dataset, normalized with train statistics.
#[derive(Clone, Debug)]
pub struct SplitData {
    pub train: Dataset,
    pub eval: Dataset,
}

/// Seeded per-epoch shuffling into fixed-size batches; the last partial
/// batch is kept.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Batcher {
    pub batch_size: usize,
    pub seed: u64,
}

impl Batcher {
    pub fn new(batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size < 1 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        Ok(Self { batch_size, seed })
    }

    pub fn epoch(&self, ids: &[usize], epoch: usize) -> Vec<Vec<usize>> {
        let mut order = ids.to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);
        order.chunks(self.batch_size).map(<[usize]>::to_vec).collect()
    }

    pub fn batches_for(&self, n: usize) -> usize {
        n.div_ceil(self.batch_size)
    }
}

/// Stratified split, train-only normalization, and a batcher.
pub fn split_and_batch(ds: &Dataset, eval_fraction: f64, batch_size: usize, seed: u64) -> Result<(SplitData, Batcher)> {
    let batcher = Batcher::new(batch_size, seed)?;
    let (train_ids, eval_ids) = stratified_split(ds, eval_fraction, seed)?;
    let mut train = ds.subset(&train_ids);
    let mut eval = ds.subset(&eval_ids);
    let stats = train.fit_norm();
    train.normalize(&stats);
    eval.normalize(&stats);
    Ok((SplitData { train, eval }, batcher))
}

/// Mirrors each `[C, H, W]` sample left-right with probability one half.
pub fn random_hflip(batch: &mut Tensor, rng: &mut impl Rng) {
    let shape = batch.shape().to_vec();
    if shape.len() != 4 {
        return;
    }
    let (c, h, w) = (shape[1], shape[2], shape[3]);
    for sample in batch.data_mut().chunks_mut(c * h * w) {
        if rng.random_bool(0.5) {
            for row in sample.chunks_mut(w) {
                row.reverse();
            }
        }
    }
}
