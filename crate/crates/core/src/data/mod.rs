//! Labeled datasets, z-score normalization, seeded synthetic ID/OOD
//! benchmarks and CSV ingestion.

mod csvio;
mod synth;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub(crate) use csvio::fmt_f64;
pub use csvio::{ingest_csv, write_labeled_csv, write_matrix_csv, CsvSchema, Ingested};
pub use synth::{
    gen_gaussian_benchmark, gen_moons_benchmark, GaussianSpec, MoonsSpec, OodPlacement,
};

/// Per-feature mean and standard deviation fitted on training data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    /// Population statistics of each column. Constant columns get std 1.
    pub fn fit(features: &Tensor) -> Self {
        let (n, d) = (features.rows(), features.cols());
        let mut mean = vec![0.0; d];
        for row in features.row_iter() {
            mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; d];
        for row in features.row_iter() {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var
            .into_iter()
            .map(|s| {
                let sd = (s / n as f64).sqrt();
                if sd > 0.0 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Normalization { mean, std }
    }

    pub fn apply(&self, features: &Tensor) -> Result<Tensor> {
        if features.cols() != self.mean.len() {
            return Err(Error::Shape(format!(
                "normalization fitted on {} features, got {}",
                self.mean.len(),
                features.cols()
            )));
        }
        let d = self.mean.len();
        let data = features
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| (v - self.mean[i % d]) / self.std[i % d])
            .collect();
        Tensor::matrix(features.rows(), d, data)
    }
}

/// Feature matrix with integer class labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledSet {
    features: Tensor,
    labels: Vec<usize>,
    num_classes: usize,
    normalization: Option<Normalization>,
}

impl LabeledSet {
    pub fn new(features: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if features.shape().len() != 2 {
            return Err(Error::Shape(format!(
                "features must be a matrix, got shape {:?}",
                features.shape()
            )));
        }
        if features.rows() != labels.len() {
            return Err(Error::Shape(format!(
                "{} feature rows but {} labels",
                features.rows(),
                labels.len()
            )));
        }
        if !features.all_finite() {
            return Err(Error::Usage("features contain NaN or Inf".into()));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Usage(format!(
                "label {bad} outside [0,{num_classes})"
            )));
        }
        Ok(LabeledSet {
            features,
            labels,
            num_classes,
            normalization: None,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>], labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Usage("empty dataset".into()));
        }
        LabeledSet::new(Tensor::from_rows(rows)?, labels, num_classes)
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn normalization(&self) -> Option<&Normalization> {
        self.normalization.as_ref()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Returns a copy with `norm` applied to the features and recorded.
    pub fn normalized_with(&self, norm: &Normalization) -> Result<Self> {
        Ok(LabeledSet {
            features: norm.apply(&self.features)?,
            labels: self.labels.clone(),
            num_classes: self.num_classes,
            normalization: Some(norm.clone()),
        })
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        Ok(LabeledSet {
            features: self.features.select_rows(indices)?,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            normalization: self.normalization.clone(),
        })
    }
}

/// How far the OOD cluster sits from the ID data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Separation {
    Far,
    Overlapping,
}

/// Generator name, every argument and the seed that produced a benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub generator: String,
    pub args: serde_json::Value,
    pub seed: u64,
}

/// Training split, labeled ID test split and unlabeled OOD test matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct OodBenchmark {
    pub train: LabeledSet,
    pub test_id: LabeledSet,
    pub test_ood: Tensor,
    pub separation: Separation,
    pub seed: u64,
    pub manifest: Manifest,
}

impl OodBenchmark {
    /// Fits z-score statistics on the training split and applies them to
    /// all three parts.
    pub fn normalize(self) -> Result<Self> {
        let norm = Normalization::fit(self.train.features());
        Ok(OodBenchmark {
            train: self.train.normalized_with(&norm)?,
            test_id: self.test_id.normalized_with(&norm)?,
            test_ood: norm.apply(&self.test_ood)?,
            ..self
        })
    }

    pub fn dim(&self) -> usize {
        self.train.dim()
    }
}
