//! Confidence scores: higher always means "more in-distribution".

mod gaussian;
mod odin;

use std::path::Path;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::data::fmt_f64;
use crate::error::{Error, Result};
use crate::nn::{argmax, Classifier, DuqModel};

pub use gaussian::{cholesky, fit_gaussian_stats, mahalanobis_score, GaussianStats, PoolSpec};
pub use odin::{log_max_softmax_gradient, odin_perturb, odin_score};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub id_score: f64,
    pub predicted_class: usize,
}

/// Scores for a batch plus any non-fatal notices raised while computing
/// them.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScoreBatch {
    pub scores: Vec<Score>,
    pub notices: Vec<String>,
}

impl ScoreBatch {
    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn id_scores(&self) -> Vec<f64> {
        self.scores.iter().map(|s| s.id_score).collect()
    }

    pub fn predictions(&self) -> Vec<usize> {
        self.scores.iter().map(|s| s.predicted_class).collect()
    }
}

/// One scored test sample, as written to the scores CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredSample {
    pub sample_id: usize,
    pub method: String,
    pub id_score: f64,
    pub is_ood: bool,
    pub predicted_class: usize,
    pub true_class: Option<usize>,
}

/// Whether a method's scores are probabilities, so calibration applies.
pub fn is_probability_score(method: &str) -> bool {
    !method.starts_with("mahalanobis")
}

/// Joins ID and OOD scores into one labeled table; ID samples come first.
pub fn label_scores(
    method: &str,
    id: &ScoreBatch,
    id_labels: &[usize],
    ood: &ScoreBatch,
) -> Result<Vec<ScoredSample>> {
    if id.len() != id_labels.len() {
        return Err(Error::Shape(format!(
            "{} ID scores but {} labels",
            id.len(),
            id_labels.len()
        )));
    }
    let id_rows = id
        .scores
        .iter()
        .zip(id_labels)
        .map(|(s, &l)| (s, false, Some(l)));
    let ood_rows = ood.scores.iter().map(|s| (s, true, None));
    Ok(id_rows
        .chain(ood_rows)
        .enumerate()
        .map(|(i, (s, is_ood, true_class))| ScoredSample {
            sample_id: i,
            method: method.to_string(),
            id_score: s.id_score,
            is_ood,
            predicted_class: s.predicted_class,
            true_class,
        })
        .collect())
}

const SCORE_HEADER: [&str; 6] = [
    "sample_id",
    "method",
    "id_score",
    "is_ood",
    "predicted_class",
    "true_class",
];

pub fn write_scores_csv(path: &Path, rows: &[ScoredSample]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(SCORE_HEADER)?;
    for r in rows {
        w.write_record([
            r.sample_id.to_string(),
            r.method.clone(),
            fmt_f64(r.id_score),
            r.is_ood.to_string(),
            r.predicted_class.to_string(),
            r.true_class.map(|c| c.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_scores_csv(path: &Path) -> Result<Vec<ScoredSample>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::Reader::from_reader(file);
    if reader.headers()?.iter().ne(SCORE_HEADER) {
        return Err(Error::Parse {
            row: 1,
            message: format!("expected header {}", SCORE_HEADER.join(",")),
        });
    }
    let mut out = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let row = i + 2;
        let rec = rec?;
        let bad = |what: &str| Error::Parse {
            row,
            message: format!("invalid {what}"),
        };
        if rec.len() != SCORE_HEADER.len() {
            return Err(bad("field count"));
        }
        let true_class = match &rec[5] {
            "" => None,
            s => Some(s.parse().map_err(|_| bad("true_class"))?),
        };
        out.push(ScoredSample {
            sample_id: rec[0].parse().map_err(|_| bad("sample_id"))?,
            method: rec[1].to_string(),
            id_score: rec[2].parse().map_err(|_| bad("id_score"))?,
            is_ood: rec[3].parse().map_err(|_| bad("is_ood"))?,
            predicted_class: rec[4].parse().map_err(|_| bad("predicted_class"))?,
            true_class,
        });
    }
    Ok(out)
}

fn scores_from_posteriors(posteriors: &Tensor) -> Vec<Score> {
    posteriors
        .row_iter()
        .map(|p| {
            let c = argmax(p);
            Score {
                id_score: p[c],
                predicted_class: c,
            }
        })
        .collect()
}

/// Maximum class probability at temperature `tau`. The predicted class is
/// the logit argmax, so it does not depend on `tau`.
pub fn mcp_score(clf: &Classifier, x: &Tensor, tau: f64) -> Result<ScoreBatch> {
    let out = clf.predict(x, tau)?;
    let scores = out
        .posteriors
        .row_iter()
        .zip(out.logits.row_iter())
        .map(|(p, l)| {
            let c = argmax(l);
            Score {
                id_score: p.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                predicted_class: c,
            }
        })
        .collect();
    Ok(ScoreBatch {
        scores,
        notices: Vec::new(),
    })
}

/// Max of the posterior averaged over `n_passes` dropout-active forward
/// passes. Without dropout this is plain MCP.
pub fn mcdp_score(
    clf: &Classifier,
    x: &Tensor,
    n_passes: usize,
    rng: &mut impl RngCore,
) -> Result<ScoreBatch> {
    if n_passes == 0 {
        return Err(Error::Usage("n_passes must be at least 1".into()));
    }
    if clf.config().dropout_p == 0.0 {
        let mut batch = mcp_score(clf, x, 1.0)?;
        batch
            .notices
            .push("dropout probability is 0; MC dropout reduces to MCP".into());
        return Ok(batch);
    }
    let mut sum: Option<Tensor> = None;
    for _ in 0..n_passes {
        let p = clf.forward(x, 1.0, true, rng)?.posteriors;
        sum = Some(match sum {
            None => p,
            Some(mut s) => {
                s.data_mut()
                    .iter_mut()
                    .zip(p.data())
                    .for_each(|(a, b)| *a += b);
                s
            }
        });
    }
    let mean = sum.expect("n_passes >= 1").map(|v| v / n_passes as f64);
    Ok(ScoreBatch {
        scores: scores_from_posteriors(&mean),
        notices: Vec::new(),
    })
}

/// How per-member Mahalanobis scores are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Consensus {
    #[default]
    Mean,
    Min,
    Median,
}

impl Consensus {
    fn combine(self, values: &mut [f64]) -> f64 {
        match self {
            Consensus::Mean => values.iter().sum::<f64>() / values.len() as f64,
            Consensus::Min => values.iter().copied().fold(f64::INFINITY, f64::min),
            Consensus::Median => {
                values.sort_by(f64::total_cmp);
                let n = values.len();
                if n % 2 == 1 {
                    values[n / 2]
                } else {
                    (values[n / 2 - 1] + values[n / 2]) / 2.0
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EnsembleMember<'a> {
    pub classifier: &'a Classifier,
    /// Required for the Mahalanobis variant.
    pub stats: Option<&'a GaussianStats>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnsembleVariant {
    /// Max of the mean member posterior.
    Mcp,
    /// Combined member Mahalanobis scores.
    Mahalanobis(Consensus),
}

/// Scores an ensemble. Predictions always come from the mean posterior.
pub fn ensemble_score(
    members: &[EnsembleMember<'_>],
    x: &Tensor,
    variant: EnsembleVariant,
) -> Result<ScoreBatch> {
    let first = members
        .first()
        .ok_or_else(|| Error::Usage("ensemble has no members".into()))?;
    let (d, c) = (first.classifier.input_dim(), first.classifier.num_classes());
    if members
        .iter()
        .any(|m| m.classifier.input_dim() != d || m.classifier.num_classes() != c)
    {
        return Err(Error::Usage(
            "ensemble members disagree on input or class count".into(),
        ));
    }
    let m = members.len() as f64;
    let mut notices = Vec::new();
    let mut mean_post: Option<Tensor> = None;
    for member in members {
        let p = member.classifier.predict(x, 1.0)?.posteriors;
        mean_post = Some(match mean_post {
            None => p,
            Some(mut s) => {
                s.data_mut()
                    .iter_mut()
                    .zip(p.data())
                    .for_each(|(a, b)| *a += b);
                s
            }
        });
    }
    let mean_post = mean_post.expect("non-empty").map(|v| v / m);
    let mut scores = scores_from_posteriors(&mean_post);

    if let EnsembleVariant::Mahalanobis(consensus) = variant {
        let mut per_member = Vec::with_capacity(members.len());
        for (i, member) in members.iter().enumerate() {
            let stats = member.stats.ok_or_else(|| {
                Error::Usage(format!("ensemble member {i} has no Gaussian statistics"))
            })?;
            let batch = mahalanobis_score(stats, member.classifier, x)?;
            notices.extend(batch.notices.iter().cloned());
            per_member.push(batch.id_scores());
        }
        notices.dedup();
        let mut column = vec![0.0; members.len()];
        for (j, s) in scores.iter_mut().enumerate() {
            for (slot, member_scores) in column.iter_mut().zip(&per_member) {
                *slot = member_scores[j];
            }
            s.id_score = consensus.combine(&mut column);
        }
    }
    Ok(ScoreBatch { scores, notices })
}

/// Maximum RBF kernel value of a DUQ model.
pub fn duq_score(model: &DuqModel, x: &Tensor) -> Result<ScoreBatch> {
    let scores = model
        .predict(x)?
        .into_iter()
        .map(|(id_score, predicted_class)| Score {
            id_score,
            predicted_class,
        })
        .collect();
    Ok(ScoreBatch {
        scores,
        notices: Vec::new(),
    })
}
