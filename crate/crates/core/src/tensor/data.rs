//! Synthetic Gaussian-mixture classification data.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Parameters of the mixture: `samples` points in `dim` dimensions over
/// `classes` clusters whose means lie on the sphere of radius `class_sep`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub samples: usize,
    pub dim: usize,
    pub classes: usize,
    pub class_sep: f64,
    pub noise_sigma: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// Row-major `samples x dim`.
    pub features: Vec<f64>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub dim: usize,
    pub seed: u64,
}

/// Borrowed view of a set of rows.
#[derive(Debug, Clone, Copy)]
pub struct Batch<'a> {
    pub features: &'a [f64],
    pub labels: &'a [usize],
    pub dim: usize,
}

impl<'a> Batch<'a> {
    pub fn new(features: &'a [f64], labels: &'a [usize], dim: usize) -> Self {
        Batch {
            features,
            labels,
            dim,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn rows(&self) -> impl Iterator<Item = (&'a [f64], &'a usize)> + 'a {
        self.features.chunks_exact(self.dim.max(1)).zip(self.labels.iter())
    }
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn as_batch(&self) -> Batch<'_> {
        Batch::new(&self.features, &self.labels, self.dim)
    }

    /// Rows `[start, end)` as a batch.
    pub fn slice(&self, start: usize, end: usize) -> Batch<'_> {
        Batch::new(
            &self.features[start * self.dim..end * self.dim],
            &self.labels[start..end],
            self.dim,
        )
    }

    /// Copies the given rows, in order, into a new dataset.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        let mut features = Vec::with_capacity(indices.len() * self.dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            features.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Dataset {
            features,
            labels,
            num_classes: self.num_classes,
            dim: self.dim,
            seed: self.seed,
        }
    }

    /// The first `len - n_val` rows and the last `n_val` rows. Rows are already
    /// shuffled at generation time.
    pub fn split_tail(&self, n_val: usize) -> (Dataset, Dataset) {
        let n_train = self.len().saturating_sub(n_val);
        let train: Vec<usize> = (0..n_train).collect();
        let val: Vec<usize> = (n_train..self.len()).collect();
        (self.select(&train), self.select(&val))
    }
}

pub fn make_synthetic_dataset(spec: &DatasetSpec, seed: u64) -> Result<Dataset> {
    if spec.classes < 2 {
        return Err(Error::config(format!("need at least 2 classes, got {}", spec.classes)));
    }
    if spec.samples < spec.classes {
        return Err(Error::config(format!(
            "{} samples cannot cover {} classes",
            spec.samples, spec.classes
        )));
    }
    if spec.dim == 0 {
        return Err(Error::config("feature dimension must be >= 1"));
    }
    if !(spec.noise_sigma >= 0.0) || !spec.noise_sigma.is_finite() {
        return Err(Error::config(format!("noise_sigma {} must be >= 0", spec.noise_sigma)));
    }
    if !spec.class_sep.is_finite() || spec.class_sep < 0.0 {
        return Err(Error::config(format!("class_sep {} must be >= 0", spec.class_sep)));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let means: Vec<Vec<f64>> = (0..spec.classes)
        .map(|_| loop {
            let dir: Vec<f64> = (0..spec.dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-12 {
                break dir.iter().map(|x| x / norm * spec.class_sep).collect();
            }
        })
        .collect();

    let mut labels: Vec<usize> = (0..spec.samples).map(|i| i % spec.classes).collect();
    labels.shuffle(&mut rng);

    let mut features = Vec::with_capacity(spec.samples * spec.dim);
    for &y in &labels {
        for &mu in &means[y] {
            let z: f64 = StandardNormal.sample(&mut rng);
            features.push(mu + spec.noise_sigma * z);
        }
    }
    Ok(Dataset {
        features,
        labels,
        num_classes: spec.classes,
        dim: spec.dim,
        seed,
    })
}
