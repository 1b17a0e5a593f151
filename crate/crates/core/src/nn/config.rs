use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture and SGD settings for an MLP classifier.
///
/// Defaults: momentum 0.9, weight decay 5e-4, dropout 0.3, with widths and
/// epochs sized for small tabular data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MlpConfig {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub num_classes: usize,
    pub dropout_p: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Optional `[channels, height, width]` view of the last hidden layer,
    /// which makes its activations eligible for spatial pooling.
    pub feature_map: Option<[usize; 3]>,
}

impl Default for MlpConfig {
    fn default() -> Self {
        MlpConfig {
            input_dim: 2,
            hidden_dims: vec![32, 32],
            num_classes: 2,
            dropout_p: 0.3,
            weight_decay: 5e-4,
            momentum: 0.9,
            lr: 0.05,
            epochs: 40,
            batch_size: 32,
            seed: 0,
            feature_map: None,
        }
    }
}

impl MlpConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Parameter(msg));
        if self.input_dim == 0 {
            return bad("input_dim must be positive".into());
        }
        if self.hidden_dims.contains(&0) {
            return bad("hidden_dims must all be positive".into());
        }
        if self.num_classes < 2 {
            return bad(format!(
                "num_classes must be >= 2, got {}",
                self.num_classes
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return bad(format!(
                "dropout_p must lie in [0,1), got {}",
                self.dropout_p
            ));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!(
                "weight_decay must be >= 0, got {}",
                self.weight_decay
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0,1), got {}", self.momentum));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive".into());
        }
        if let Some([c, h, w]) = self.feature_map {
            let last = self.feature_dim();
            if c * h * w != last || self.hidden_dims.is_empty() {
                return bad(format!(
                    "feature_map {c}x{h}x{w} does not match last hidden width {last}"
                ));
            }
        }
        Ok(())
    }

    /// Width of the representation `z` used for distance-based scoring.
    pub fn feature_dim(&self) -> usize {
        self.hidden_dims.last().copied().unwrap_or(self.input_dim)
    }
}

/// DUQ head settings. `None` fields are derived from the feature width.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DuqConfig {
    pub embedding_dim: Option<usize>,
    pub length_scale: Option<f64>,
    pub centroid_momentum: f64,
    pub penalty_weight: f64,
    pub fd_epsilon: f64,
    /// Replaces the model's learning rate when training DUQ.
    pub lr: f64,
}

impl Default for DuqConfig {
    fn default() -> Self {
        DuqConfig {
            embedding_dim: None,
            length_scale: None,
            centroid_momentum: 0.999,
            penalty_weight: 0.5,
            fd_epsilon: 1e-3,
            lr: 0.01,
        }
    }
}

impl DuqConfig {
    pub fn resolved_embedding_dim(&self, feature_dim: usize) -> usize {
        self.embedding_dim.unwrap_or(feature_dim)
    }

    /// `0.1·√F` unless overridden.
    pub fn resolved_length_scale(&self, feature_dim: usize) -> f64 {
        self.length_scale
            .unwrap_or_else(|| 0.1 * (feature_dim as f64).sqrt())
    }

    pub fn validate(&self) -> Result<()> {
        if self.embedding_dim == Some(0) {
            return Err(Error::Parameter("embedding_dim must be positive".into()));
        }
        if let Some(s) = self.length_scale {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::Parameter(format!(
                    "length_scale must be positive, got {s}"
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.centroid_momentum) {
            return Err(Error::Parameter(format!(
                "centroid_momentum must lie in [0,1], got {}",
                self.centroid_momentum
            )));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Parameter(format!(
                "lr must be positive, got {}",
                self.lr
            )));
        }
        if !(self.penalty_weight >= 0.0 && self.penalty_weight.is_finite()) {
            return Err(Error::Parameter("penalty_weight must be >= 0".into()));
        }
        if !(self.fd_epsilon > 0.0 && self.fd_epsilon.is_finite()) {
            return Err(Error::Parameter(format!(
                "fd_epsilon must be positive, got {}",
                self.fd_epsilon
            )));
        }
        Ok(())
    }
}
