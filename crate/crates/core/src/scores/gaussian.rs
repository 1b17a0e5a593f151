use serde::{Deserialize, Serialize};

use super::{Score, ScoreBatch};
use crate::autodiff::Tensor;
use crate::data::LabeledSet;
use crate::error::{Error, Result};
use crate::nn::{argmax, Classifier};

const RIDGE_START_FRACTION: f64 = 1e-6;
const RIDGE_GROWTH: f64 = 10.0;
const MAX_RIDGE_ATTEMPTS: usize = 40;

/// Strided max pooling over the spatial dims of a `[C, H, W]` feature map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolSpec {
    pub kernel: [usize; 2],
    pub stride: usize,
}

impl PoolSpec {
    pub fn new(kh: usize, kw: usize, stride: usize) -> Self {
        PoolSpec {
            kernel: [kh, kw],
            stride,
        }
    }

    /// Output spatial size `(⌊(H−kh)/s⌋+1, ⌊(W−kw)/s⌋+1)`.
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let [kh, kw] = self.kernel;
        if kh == 0 || kw == 0 || self.stride == 0 {
            return Err(Error::Parameter(
                "pool kernel and stride must be positive".into(),
            ));
        }
        if kh > h || kw > w {
            return Err(Error::Parameter(format!(
                "{kh}x{kw} pool kernel does not fit a {h}x{w} feature map"
            )));
        }
        Ok(((h - kh) / self.stride + 1, (w - kw) / self.stride + 1))
    }

    /// Pools each row of `features`, read as a `[c, h, w]` map.
    pub fn apply(&self, features: &Tensor, [c, h, w]: [usize; 3]) -> Result<Tensor> {
        if features.cols() != c * h * w {
            return Err(Error::Shape(format!(
                "feature width {} is not {c}x{h}x{w}",
                features.cols()
            )));
        }
        let (oh, ow) = self.output_hw(h, w)?;
        let [kh, kw] = self.kernel;
        let s = self.stride;
        let mut out = Vec::with_capacity(features.rows() * c * oh * ow);
        for row in features.row_iter() {
            for ch in 0..c {
                let map = &row[ch * h * w..(ch + 1) * h * w];
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut m = f64::NEG_INFINITY;
                        for dy in 0..kh {
                            for dx in 0..kw {
                                m = m.max(map[(oy * s + dy) * w + ox * s + dx]);
                            }
                        }
                        out.push(m);
                    }
                }
            }
        }
        Tensor::matrix(features.rows(), c * oh * ow, out)
    }
}

/// Lower Cholesky factor of a symmetric matrix, or `None` when a pivot is
/// not strictly positive.
pub fn cholesky(a: &Tensor) -> Option<Tensor> {
    let n = a.rows();
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let dot: f64 = (0..j).map(|k| l[i * n + k] * l[j * n + k]).sum();
            if i == j {
                let pivot = a.get(i, i) - dot;
                if !(pivot > 0.0 && pivot.is_finite()) {
                    return None;
                }
                l[i * n + i] = pivot.sqrt();
            } else {
                l[i * n + j] = (a.get(i, j) - dot) / l[j * n + j];
            }
        }
    }
    Tensor::matrix(n, n, l).ok()
}

/// Solves `L y = b` for lower-triangular `L`.
fn solve_lower(l: &Tensor, b: &[f64]) -> Vec<f64> {
    let n = b.len();
    let mut y = vec![0.0; n];
    for i in 0..n {
        let dot: f64 = (0..i).map(|k| l.get(i, k) * y[k]).sum();
        y[i] = (b[i] - dot) / l.get(i, i);
    }
    y
}

/// Solves `Lᵀ x = y` for lower-triangular `L`.
fn solve_lower_transposed(l: &Tensor, y: &[f64]) -> Vec<f64> {
    let n = y.len();
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let dot: f64 = (i + 1..n).map(|k| l.get(k, i) * x[k]).sum();
        x[i] = (y[i] - dot) / l.get(i, i);
    }
    x
}

/// Class means and tied covariance of a feature representation, with the
/// Cholesky factor of the ridge-regularized covariance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianStats {
    pub class_means: Vec<Vec<f64>>,
    pub covariance: Tensor,
    pub ridge: f64,
    pub cholesky: Tensor,
    /// Pooling applied to features before fitting, replayed when scoring.
    pub pool: Option<PoolSpec>,
    pub notices: Vec<String>,
}

impl GaussianStats {
    /// Fits from raw feature rows. The ridge starts at `1e-6·trace(Σ)/Z` and
    /// grows tenfold until the factorization succeeds.
    pub fn from_features(z: &Tensor, labels: &[usize], num_classes: usize) -> Result<Self> {
        if z.rows() != labels.len() {
            return Err(Error::Shape(format!(
                "{} feature rows but {} labels",
                z.rows(),
                labels.len()
            )));
        }
        let dim = z.cols();
        let mut counts = vec![0usize; num_classes];
        let mut means = vec![vec![0.0; dim]; num_classes];
        for (row, &l) in z.row_iter().zip(labels) {
            if l >= num_classes {
                return Err(Error::Fit(format!("label {l} outside [0,{num_classes})")));
            }
            counts[l] += 1;
            means[l].iter_mut().zip(row).for_each(|(m, v)| *m += v);
        }
        if let Some(c) = counts.iter().position(|&n| n == 0) {
            return Err(Error::Fit(format!("class {c} has no training samples")));
        }
        for (m, &n) in means.iter_mut().zip(&counts) {
            m.iter_mut().for_each(|v| *v /= n as f64);
        }

        let mut cov = vec![0.0; dim * dim];
        let mut centered = vec![0.0; dim];
        for (row, &l) in z.row_iter().zip(labels) {
            for ((c, v), m) in centered.iter_mut().zip(row).zip(&means[l]) {
                *c = v - m;
            }
            for i in 0..dim {
                for j in i..dim {
                    cov[i * dim + j] += centered[i] * centered[j];
                }
            }
        }
        let n = z.rows() as f64;
        for i in 0..dim {
            for j in i..dim {
                let v = cov[i * dim + j] / n;
                cov[i * dim + j] = v;
                cov[j * dim + i] = v;
            }
        }
        let covariance = Tensor::matrix(dim, dim, cov)?;
        let trace: f64 = (0..dim).map(|i| covariance.get(i, i)).sum();
        let mut ridge = if trace > 0.0 {
            RIDGE_START_FRACTION * trace / dim as f64
        } else {
            RIDGE_START_FRACTION
        };
        for _ in 0..MAX_RIDGE_ATTEMPTS {
            if let Ok(stats) = GaussianStats::from_parts(means.clone(), covariance.clone(), ridge) {
                return Ok(stats);
            }
            ridge *= RIDGE_GROWTH;
        }
        Err(Error::Fit("covariance could not be regularized".into()))
    }

    /// Builds stats from explicit means and covariance, factorizing
    /// `covariance + ridge·I`.
    pub fn from_parts(class_means: Vec<Vec<f64>>, covariance: Tensor, ridge: f64) -> Result<Self> {
        let dim = covariance.rows();
        if covariance.cols() != dim || class_means.iter().any(|m| m.len() != dim) {
            return Err(Error::Shape(
                "means and covariance disagree on dimension".into(),
            ));
        }
        if class_means.is_empty() {
            return Err(Error::Fit("no classes".into()));
        }
        if !(ridge >= 0.0 && ridge.is_finite()) {
            return Err(Error::Parameter(format!("ridge must be >= 0, got {ridge}")));
        }
        let mut regularized = covariance.clone();
        for i in 0..dim {
            regularized.data_mut()[i * dim + i] += ridge;
        }
        let chol = cholesky(&regularized).ok_or_else(|| {
            Error::Fit(format!("covariance + {ridge}·I is not positive definite"))
        })?;
        Ok(GaussianStats {
            class_means,
            covariance,
            ridge,
            cholesky: chol,
            pool: None,
            notices: Vec::new(),
        })
    }

    pub fn dim(&self) -> usize {
        self.covariance.rows()
    }

    pub fn num_classes(&self) -> usize {
        self.class_means.len()
    }

    /// `(z−μ)ᵀ(Σ+λI)⁻¹(z−μ)` via a forward and a backward triangular solve.
    pub fn squared_distance(&self, z: &[f64], class: usize) -> f64 {
        let d: Vec<f64> = z
            .iter()
            .zip(&self.class_means[class])
            .map(|(a, b)| a - b)
            .collect();
        let y = solve_lower(&self.cholesky, &d);
        let x = solve_lower_transposed(&self.cholesky, &y);
        d.iter().zip(&x).map(|(a, b)| a * b).sum()
    }

    /// `max_c −(z−μ_c)ᵀ(Σ+λI)⁻¹(z−μ_c)` with the maximizing class, per row.
    pub fn score_features(&self, z: &Tensor) -> Result<Vec<(f64, usize)>> {
        if z.cols() != self.dim() {
            return Err(Error::Shape(format!(
                "features have {} dims but stats were fitted on {}",
                z.cols(),
                self.dim()
            )));
        }
        Ok(z.row_iter()
            .map(|row| {
                let neg: Vec<f64> = (0..self.num_classes())
                    .map(|c| -self.squared_distance(row, c))
                    .collect();
                let best = argmax(&neg);
                // +0.0 turns a -0.0 distance into 0
                (neg[best] + 0.0, best)
            })
            .collect())
    }
}

/// Last-hidden-layer features, pooled when requested and the classifier
/// declares a spatial layout.
pub(crate) fn classifier_features(
    clf: &Classifier,
    x: &Tensor,
    pool: Option<&PoolSpec>,
    notices: &mut Vec<String>,
) -> Result<Tensor> {
    let z = clf.predict(x, 1.0)?.hidden;
    match (pool, clf.config().feature_map) {
        (Some(p), Some(layout)) => p.apply(&z, layout),
        (Some(_), None) => {
            notices.push("features have no spatial layout; pooling skipped".into());
            Ok(z)
        }
        (None, _) => Ok(z),
    }
}

/// Fits class means and tied covariance of `clf`'s last hidden layer on
/// the training data.
pub fn fit_gaussian_stats(
    clf: &Classifier,
    train: &LabeledSet,
    pool: Option<PoolSpec>,
) -> Result<GaussianStats> {
    let mut notices = Vec::new();
    let z = classifier_features(clf, train.features(), pool.as_ref(), &mut notices)?;
    let mut stats = GaussianStats::from_features(&z, train.labels(), clf.num_classes())?;
    stats.pool = pool;
    stats.notices = notices;
    Ok(stats)
}

/// Mahalanobis ID score of each input; the predicted class is the
/// classifier's own.
pub fn mahalanobis_score(
    stats: &GaussianStats,
    clf: &Classifier,
    x: &Tensor,
) -> Result<ScoreBatch> {
    let mut notices = Vec::new();
    let out = clf.predict(x, 1.0)?;
    let z = classifier_features(clf, x, stats.pool.as_ref(), &mut notices)?;
    let scores = stats
        .score_features(&z)?
        .into_iter()
        .zip(out.logits.row_iter())
        .map(|((id_score, _), logits)| Score {
            id_score,
            predicted_class: argmax(logits),
        })
        .collect();
    Ok(ScoreBatch { scores, notices })
}
