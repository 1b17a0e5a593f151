//! Separation (AUROC, average precision) and calibration (ECE) metrics.
//!
//! Detection metrics treat OOD as the positive class and rank samples by
//! `-id_score`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::fmt_f64;
use crate::error::{Error, Result};
use crate::scores::{is_probability_score, ScoredSample};

pub const DEFAULT_ECE_BINS: usize = 15;
pub const ORIENTATION: &str = "positive=ood; detector=-id_score";

/// Neumaier-compensated running sum.
#[derive(Debug, Clone, Copy, Default)]
struct KahanSum {
    sum: f64,
    comp: f64,
}

impl KahanSum {
    fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.comp += (self.sum - t) + v;
        } else {
            self.comp += (v - t) + self.sum;
        }
        self.sum = t;
    }

    fn value(self) -> f64 {
        self.sum + self.comp
    }
}

/// `(n_id, n_ood)` counts per tie group, plus the class totals.
type TieGroups = (Vec<(u64, u64)>, u64, u64);

/// Tie groups in ascending `id_score` order.
fn tie_groups(scores: &[ScoredSample]) -> Result<TieGroups> {
    if scores.iter().any(|s| s.id_score.is_nan()) {
        return Err(Error::Domain("NaN score".into()));
    }
    let mut sorted: Vec<(f64, bool)> = scores.iter().map(|s| (s.id_score, s.is_ood)).collect();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut groups: Vec<(u64, u64)> = Vec::new();
    let mut last: Option<f64> = None;
    for (v, is_ood) in sorted {
        // == rather than total_cmp so that -0.0 and 0.0 tie
        if last != Some(v) {
            groups.push((0, 0));
            last = Some(v);
        }
        let g = groups.last_mut().expect("pushed above");
        if is_ood {
            g.1 += 1;
        } else {
            g.0 += 1;
        }
    }
    let n_id: u64 = groups.iter().map(|g| g.0).sum();
    let n_ood: u64 = groups.iter().map(|g| g.1).sum();
    if n_id == 0 || n_ood == 0 {
        return Err(Error::UndefinedMetric(format!(
            "need ID and OOD samples, got {n_id} ID and {n_ood} OOD"
        )));
    }
    Ok((groups, n_id, n_ood))
}

/// Probability that a random OOD sample scores below a random ID sample,
/// ties counted one half.
pub fn auroc(scores: &[ScoredSample]) -> Result<f64> {
    let (groups, n_id, n_ood) = tie_groups(scores)?;
    let mut ood_below: u128 = 0;
    let mut twice_wins: u128 = 0;
    for (id_g, ood_g) in groups {
        twice_wins += id_g as u128 * (2 * ood_below + ood_g as u128);
        ood_below += ood_g as u128;
    }
    Ok(twice_wins as f64 / (2 * n_id as u128 * n_ood as u128) as f64)
}

/// Average precision `Σ_k (R_k − R_{k−1})·P_k` with one threshold per
/// distinct score.
pub fn aucpr(scores: &[ScoredSample]) -> Result<f64> {
    let (groups, _, n_ood) = tie_groups(scores)?;
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut ap = KahanSum::default();
    for (id_g, ood_g) in groups {
        tp += ood_g;
        fp += id_g;
        if ood_g > 0 {
            ap.add(ood_g as f64 / n_ood as f64 * (tp as f64 / (tp + fp) as f64));
        }
    }
    Ok(ap.value().clamp(0.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityBin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    /// `None` for empty bins.
    pub mean_conf: Option<f64>,
    pub accuracy: Option<f64>,
}

/// Equal-width confidence bins over `[0, 1]`; the last bin is closed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityBins {
    pub bins: Vec<ReliabilityBin>,
}

impl ReliabilityBins {
    pub fn n_bins(&self) -> usize {
        self.bins.len()
    }

    pub fn total(&self) -> usize {
        self.bins.iter().map(|b| b.count).sum()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = csv::Writer::from_writer(file);
        w.write_record(["bin_lower", "bin_upper", "mean_conf", "accuracy", "count"])?;
        for b in &self.bins {
            w.write_record([
                fmt_f64(b.lower),
                fmt_f64(b.upper),
                b.mean_conf.map(fmt_f64).unwrap_or_default(),
                b.accuracy.map(fmt_f64).unwrap_or_default(),
                b.count.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn bin_index(c: f64, n_bins: usize) -> usize {
    ((c * n_bins as f64).floor() as usize).min(n_bins - 1)
}

/// `Σ_b (n_b/N)·|acc_b − conf_b|` over `n_bins` equal-width bins.
pub fn ece(confidences: &[f64], correct: &[bool], n_bins: usize) -> Result<(f64, ReliabilityBins)> {
    if confidences.is_empty() {
        return Err(Error::Usage("ECE of an empty sample".into()));
    }
    if confidences.len() != correct.len() {
        return Err(Error::Usage(format!(
            "{} confidences but {} correctness flags",
            confidences.len(),
            correct.len()
        )));
    }
    if n_bins == 0 {
        return Err(Error::Parameter("n_bins must be positive".into()));
    }
    if let Some(c) = confidences.iter().find(|c| !(0.0..=1.0).contains(*c)) {
        return Err(Error::Domain(format!("confidence {c} outside [0, 1]")));
    }
    let mut conf_sum = vec![KahanSum::default(); n_bins];
    let mut hits = vec![0usize; n_bins];
    let mut counts = vec![0usize; n_bins];
    for (&c, &ok) in confidences.iter().zip(correct) {
        let b = bin_index(c, n_bins);
        conf_sum[b].add(c);
        counts[b] += 1;
        hits[b] += ok as usize;
    }
    let n = confidences.len() as f64;
    let mut total = KahanSum::default();
    let bins = (0..n_bins)
        .map(|b| {
            let count = counts[b];
            let (mean_conf, accuracy) = if count == 0 {
                (None, None)
            } else {
                let conf = conf_sum[b].value() / count as f64;
                let acc = hits[b] as f64 / count as f64;
                total.add(count as f64 / n * (acc - conf).abs());
                (Some(conf), Some(acc))
            };
            ReliabilityBin {
                lower: b as f64 / n_bins as f64,
                upper: (b + 1) as f64 / n_bins as f64,
                count,
                mean_conf,
                accuracy,
            }
        })
        .collect();
    Ok((total.value().clamp(0.0, 1.0), ReliabilityBins { bins }))
}

pub fn id_accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::Usage(format!(
            "{} predictions but {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::Usage("accuracy of an empty sample".into()));
    }
    let hits = predictions
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Metrics of one method on one ID/OOD test pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub auroc: f64,
    pub aucpr: f64,
    pub id_accuracy: f64,
    /// `None` when the method's scores are not probabilities.
    pub ece: Option<f64>,
    pub n_id: usize,
    pub n_ood: usize,
    pub method: String,
    pub config_fingerprint: String,
}

/// Computes every metric for a scored table holding a single method.
/// Reliability bins are returned when ECE applies.
pub fn evaluate(
    scores: &[ScoredSample],
    config_fingerprint: &str,
    n_bins: usize,
) -> Result<(EvalReport, Option<ReliabilityBins>)> {
    let method = scores
        .first()
        .map(|s| s.method.clone())
        .ok_or_else(|| Error::Usage("no scores to evaluate".into()))?;
    if scores.iter().any(|s| s.method != method) {
        return Err(Error::Usage("scores mix several methods".into()));
    }
    let id: Vec<&ScoredSample> = scores.iter().filter(|s| !s.is_ood).collect();
    let mut predictions = Vec::with_capacity(id.len());
    let mut labels = Vec::with_capacity(id.len());
    for s in &id {
        let label = s
            .true_class
            .ok_or_else(|| Error::Usage(format!("ID sample {} has no true class", s.sample_id)))?;
        predictions.push(s.predicted_class);
        labels.push(label);
    }
    let (ece_value, bins) = if is_probability_score(&method) {
        let conf: Vec<f64> = id.iter().map(|s| s.id_score).collect();
        let correct: Vec<bool> = predictions
            .iter()
            .zip(&labels)
            .map(|(p, l)| p == l)
            .collect();
        let (e, b) = ece(&conf, &correct, n_bins)?;
        (Some(e), Some(b))
    } else {
        (None, None)
    };
    let report = EvalReport {
        auroc: auroc(scores)?,
        aucpr: aucpr(scores)?,
        id_accuracy: id_accuracy(&predictions, &labels)?,
        ece: ece_value,
        n_id: id.len(),
        n_ood: scores.len() - id.len(),
        method,
        config_fingerprint: config_fingerprint.to_string(),
    };
    Ok((report, bins))
}
