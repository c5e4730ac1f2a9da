use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::ClassCounts;
use crate::rng::{stream_rng, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Synthetic,
    Idx,
}

/// Row-major feature matrix with integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Vec<f64>,
    dim: usize,
    labels: Vec<usize>,
    num_classes: usize,
    provenance: Provenance,
}

impl Dataset {
    pub fn new(
        features: Vec<f64>,
        dim: usize,
        labels: Vec<usize>,
        num_classes: usize,
        provenance: Provenance,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::config("feature dimension must be positive"));
        }
        if labels.is_empty() {
            return Err(Error::domain("dataset must hold at least one sample"));
        }
        if features.len() != labels.len() * dim {
            return Err(Error::dim("feature matrix", labels.len() * dim, features.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::domain(format!("label {bad} >= {num_classes} classes")));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain("non-finite feature value"));
        }
        Ok(Dataset {
            features,
            dim,
            labels,
            num_classes,
            provenance,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        histogram(self.labels.iter().copied(), self.num_classes)
    }

    /// Indices of every sample, grouped by class in ascending index order.
    pub fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut by = vec![Vec::new(); self.num_classes];
        for (i, &y) in self.labels.iter().enumerate() {
            by[y].push(i);
        }
        by
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let mut features = Vec::with_capacity(indices.len() * self.dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            features.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Dataset::new(features, self.dim, labels, self.num_classes, self.provenance)
    }

    /// Same samples with a wider label space (e.g. a test split missing the
    /// highest class).
    pub fn with_num_classes(self, num_classes: usize) -> Result<Dataset> {
        Dataset::new(self.features, self.dim, self.labels, num_classes, self.provenance)
    }

    /// `(features, label)` pairs in dataset order.
    pub fn samples(&self) -> Vec<(&[f64], usize)> {
        (0..self.len()).map(|i| (self.row(i), self.label(i))).collect()
    }
}

pub(crate) fn histogram(labels: impl Iterator<Item = usize>, num_classes: usize) -> Vec<usize> {
    let mut h = vec![0; num_classes];
    for y in labels {
        h[y] += 1;
    }
    h
}

/// Class-conditional Gaussian mixture parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub dim: usize,
    pub separation: f64,
}

impl SyntheticSpec {
    fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::config("synthetic data needs at least 2 classes"));
        }
        if self.dim < 1 {
            return Err(Error::config("synthetic feature dimension must be at least 1"));
        }
        if !(self.separation > 0.0 && self.separation.is_finite()) {
            return Err(Error::config("synthetic separation must be positive"));
        }
        Ok(())
    }

    /// Class means `separation * u_c` with seeded random unit directions `u_c`.
    pub fn class_means(&self, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = stream_rng(seed, Stream::ClassMeans, &[]);
        (0..self.classes)
            .map(|_| {
                let v: Vec<f64> = (0..self.dim).map(|_| rng.sample(StandardNormal)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
                v.into_iter().map(|x| self.separation * x / norm).collect()
            })
            .collect()
    }

    fn sample(&self, means: &[Vec<f64>], n_per_class: usize, rng: &mut impl Rng) -> Result<Dataset> {
        if n_per_class < 1 {
            return Err(Error::config("n_per_class must be at least 1"));
        }
        let n = n_per_class * self.classes;
        let mut features = Vec::with_capacity(n * self.dim);
        let mut labels = Vec::with_capacity(n);
        for (c, mean) in means.iter().enumerate() {
            for _ in 0..n_per_class {
                features.extend(mean.iter().map(|m| m + rng.sample::<f64, _>(StandardNormal)));
                labels.push(c);
            }
        }
        Dataset::new(features, self.dim, labels, self.classes, Provenance::Synthetic)
    }

    /// Training split drawn from the seeded mixture.
    pub fn train(&self, n_per_class: usize, seed: u64) -> Result<Dataset> {
        self.validate()?;
        let means = self.class_means(seed);
        self.sample(&means, n_per_class, &mut stream_rng(seed, Stream::TrainSamples, &[]))
    }

    /// Class-balanced test split from the same mixture as [`Self::train`].
    pub fn test(&self, n_per_class: usize, seed: u64) -> Result<Dataset> {
        self.validate()?;
        let means = self.class_means(seed);
        self.sample(&means, n_per_class, &mut stream_rng(seed, Stream::TestSamples, &[]))
    }
}

/// Gaussian-mixture dataset with exactly `n_per_class` samples per class.
pub fn gen_synthetic(
    classes: usize,
    dim: usize,
    n_per_class: usize,
    separation: f64,
    seed: u64,
) -> Result<Dataset> {
    SyntheticSpec {
        classes,
        dim,
        separation,
    }
    .train(n_per_class, seed)
}

/// Subsamples classes so that class `c` keeps `round(N_max * IM^(-c/(C-1)))`.
pub fn exponential_imbalance(dataset: &Dataset, ratio: f64, seed: u64) -> Result<Dataset> {
    if !(ratio >= 1.0 && ratio.is_finite()) {
        return Err(Error::config("imbalance ratio must be >= 1"));
    }
    if ratio == 1.0 {
        return Ok(dataset.clone());
    }
    let by_class = dataset.indices_by_class();
    let n_max = by_class.iter().map(Vec::len).max().unwrap_or(0);
    let c_total = dataset.num_classes();
    let mut keep = Vec::new();
    for (c, idx) in by_class.iter().enumerate() {
        let target = if c_total > 1 {
            (n_max as f64 * ratio.powf(-(c as f64) / (c_total - 1) as f64)).round() as usize
        } else {
            n_max
        };
        let target = target.min(idx.len());
        if target == 0 {
            return Err(Error::config(format!(
                "imbalance ratio {ratio} leaves class {c} with no samples"
            )));
        }
        let mut rng = stream_rng(seed, Stream::Imbalance, &[c as u64]);
        let mut chosen = idx.clone();
        chosen.shuffle(&mut rng);
        chosen.truncate(target);
        keep.extend(chosen);
    }
    keep.sort_unstable();
    dataset.subset(&keep)
}

/// A client's local training set: dataset indices plus the labels the client
/// trains on (which differ from the dataset's labels under poisoning).
#[derive(Debug, Clone, PartialEq)]
pub struct ClientData {
    pub indices: Vec<usize>,
    pub labels: Vec<usize>,
    num_classes: usize,
}

impl ClientData {
    pub fn from_indices(dataset: &Dataset, indices: Vec<usize>) -> Self {
        let labels = indices.iter().map(|&i| dataset.label(i)).collect();
        ClientData {
            indices,
            labels,
            num_classes: dataset.num_classes(),
        }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn histogram(&self) -> Vec<usize> {
        histogram(self.labels.iter().copied(), self.num_classes)
    }

    pub fn class_counts(&self) -> Result<ClassCounts> {
        ClassCounts::new(&self.histogram())
    }

    /// Class distribution `a[c] = N_c / Σ N`.
    pub fn distribution(&self) -> Result<Vec<f64>> {
        normalize_counts(&self.histogram())
    }

    pub fn samples<'a>(&'a self, dataset: &'a Dataset) -> Vec<(&'a [f64], usize)> {
        self.indices
            .iter()
            .zip(&self.labels)
            .map(|(&i, &y)| (dataset.row(i), y))
            .collect()
    }

    /// Concatenates a (class-balanced) meta set onto the client's data.
    pub fn augment_with_meta(&self, dataset: &Dataset, meta: &[usize]) -> ClientData {
        let mut out = self.clone();
        out.indices.extend_from_slice(meta);
        out.labels.extend(meta.iter().map(|&i| dataset.label(i)));
        out
    }

    /// Replaces every label with a seeded uniform draw from `[0, C)`.
    pub fn poison_labels(&self, seed: u64) -> ClientData {
        let mut out = self.clone();
        if self.num_classes > 1 {
            let mut rng = stream_rng(seed, Stream::Poison, &[]);
            out.labels
                .iter_mut()
                .for_each(|y| *y = rng.random_range(0..self.num_classes));
        }
        out
    }
}

pub(crate) fn normalize_counts(counts: &[usize]) -> Result<Vec<f64>> {
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Err(Error::domain("client has no samples"));
    }
    Ok(counts.iter().map(|&n| n as f64 / total as f64).collect())
}

/// Draws `per_class` samples of each class (seeded) from `pool`. Returns
/// `(meta, rest)`, both sorted.
pub fn draw_meta_set(
    dataset: &Dataset,
    pool: &[usize],
    per_class: usize,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if per_class == 0 {
        return Ok((Vec::new(), pool.to_vec()));
    }
    let mut by_class = vec![Vec::new(); dataset.num_classes()];
    for &i in pool {
        by_class[dataset.label(i)].push(i);
    }
    let mut meta = Vec::new();
    for (c, idx) in by_class.iter_mut().enumerate() {
        if idx.len() < per_class {
            return Err(Error::config(format!(
                "class {c} has {} samples, fewer than the {per_class} needed for the meta set",
                idx.len()
            )));
        }
        let mut rng = stream_rng(seed, Stream::MetaSet, &[c as u64]);
        idx.shuffle(&mut rng);
        meta.extend_from_slice(&idx[..per_class]);
    }
    meta.sort_unstable();
    let taken: std::collections::HashSet<usize> = meta.iter().copied().collect();
    let rest = pool.iter().copied().filter(|i| !taken.contains(i)).collect();
    Ok((meta, rest))
}
