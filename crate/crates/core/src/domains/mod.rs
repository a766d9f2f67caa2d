//! Source/target domain data: the [`Dataset`] container, synthetic generators,
//! non-iid client partitioning and CSV persistence.

mod csv_io;
mod partition;
mod synthetic;

pub use csv_io::{load_csv, read_csv, save_csv, write_csv};
pub use partition::{partition_dirichlet, partition_label_subset, PartitionPlan, PartitionScheme};
pub use synthetic::{apply_shift, class_means, generate_gaussian_mixture, ShiftSpec};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Labelled samples stored row-major.
///
/// For regression models the label is read as the real-valued target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    features: Vec<f64>,
    dim: usize,
    labels: Vec<usize>,
    num_classes: usize,
}

impl Dataset {
    pub fn new(features: Vec<f64>, dim: usize, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if features.len() != labels.len() * dim {
            return Err(Error::DimensionMismatch {
                expected: labels.len() * dim,
                actual: features.len(),
                context: "feature matrix size",
            });
        }
        if num_classes == 0 {
            return Err(Error::invalid("num_classes must be positive"));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::invalid(format!("label {bad} outside [0, {num_classes})")));
        }
        if let Some(pos) = features.iter().position(|x| !x.is_finite()) {
            return Err(Error::invalid(format!(
                "non-finite feature in row {}",
                pos / dim.max(1)
            )));
        }
        Ok(Self {
            features,
            dim,
            labels,
            num_classes,
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

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    /// Copies the given rows, in the given order, into a new dataset.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut features = Vec::with_capacity(indices.len() * self.dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::invalid(format!("index {i} out of range")));
            }
            features.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Ok(Self {
            features,
            dim: self.dim,
            labels,
            num_classes: self.num_classes,
        })
    }

    /// Per-class sample counts.
    pub fn label_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.num_classes];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }

    /// Multiplies every feature by `c`.
    pub fn scaled(&self, c: f64) -> Self {
        Self {
            features: self.features.iter().map(|x| x * c).collect(),
            ..self.clone()
        }
    }

    /// Deterministic shuffled split into `(train, test)`; `test_fraction` of the
    /// rows (at least one on each side when `len >= 2`) go to the test set.
    pub fn split(&self, test_fraction: f64, seed: u64) -> Result<(Self, Self)> {
        use rand::seq::SliceRandom;
        if !(0.0..1.0).contains(&test_fraction) || self.len() < 2 {
            return Err(Error::invalid("split needs test_fraction in [0,1) and >= 2 rows"));
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut crate::seed::rng(seed));
        let n_test = ((self.len() as f64 * test_fraction).round() as usize).clamp(1, self.len() - 1);
        let (test, train) = idx.split_at(n_test);
        Ok((self.subset(train)?, self.subset(test)?))
    }
}
