use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::Method;
use super::run::Runner;
use crate::data::fmt_f64;
use crate::error::{Error, Result};
use crate::metrics::{auroc, evaluate, ReliabilityBins};
use crate::scores::PoolSpec;

/// AUROC gap above which a binary temperature sweep is flagged.
pub const BINARY_AUROC_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TempVariant {
    /// Unperturbed inputs, max softmax at the given temperature.
    Baseline,
    /// ODIN-perturbed inputs.
    Odin,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TempPoint {
    pub seed: u64,
    pub variant: TempVariant,
    pub tau: f64,
    pub auroc: f64,
    pub ece: f64,
    pub bins: ReliabilityBins,
}

/// AUROC spread across temperatures for one `(seed, variant)` curve of a
/// two-class model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinaryCheck {
    pub seed: u64,
    pub variant: TempVariant,
    pub auroc_gap: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TempSweep {
    pub epsilon: f64,
    pub points: Vec<TempPoint>,
    /// Empty unless the benchmark has two classes.
    pub binary_checks: Vec<BinaryCheck>,
}

impl TempSweep {
    pub fn failed(&self) -> bool {
        self.binary_checks.iter().any(|c| !c.passed)
    }

    pub fn curve(&self, seed: u64, variant: TempVariant) -> Vec<&TempPoint> {
        self.points
            .iter()
            .filter(|p| p.seed == seed && p.variant == variant)
            .collect()
    }

    /// Writes `temperature.json`, `temperature.csv` and one bins CSV per
    /// point under `dir/bins`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let bins_dir = dir.join("bins");
        std::fs::create_dir_all(&bins_dir).map_err(|e| Error::io(&bins_dir, e))?;
        let json_path = dir.join("temperature.json");
        std::fs::write(&json_path, serde_json::to_string_pretty(self)?)
            .map_err(|e| Error::io(&json_path, e))?;
        let csv_path = dir.join("temperature.csv");
        let file = std::fs::File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
        let mut w = csv::Writer::from_writer(file);
        w.write_record(["seed", "variant", "tau", "auroc", "ece"])?;
        for p in &self.points {
            let variant = variant_name(p.variant);
            w.write_record([
                p.seed.to_string(),
                variant.into(),
                fmt_f64(p.tau),
                fmt_f64(p.auroc),
                fmt_f64(p.ece),
            ])?;
            p.bins
                .write_csv(&bins_dir.join(format!("seed{}_{variant}_tau{}.csv", p.seed, p.tau)))?;
        }
        w.flush().map_err(|e| Error::io(&csv_path, e))
    }
}

fn variant_name(v: TempVariant) -> &'static str {
    match v {
        TempVariant::Baseline => "baseline",
        TempVariant::Odin => "odin",
    }
}

impl Runner<'_> {
    /// ECE, reliability bins and AUROC per temperature for plain and
    /// ODIN-perturbed predictions of the base model.
    pub fn sweep_temperature(&self, taus: &[f64], epsilon: f64) -> Result<TempSweep> {
        if taus.is_empty() {
            return Err(Error::Config("temperature list is empty".into()));
        }
        let fingerprint = self.config.fingerprint();
        let per_seed: Vec<Result<Vec<TempPoint>>> = self
            .config
            .seeds
            .par_iter()
            .map(|&seed| {
                let models = self.train_seed(&[Method::Mcp], seed);
                let mut points = Vec::new();
                for &tau in taus {
                    for variant in [TempVariant::Baseline, TempVariant::Odin] {
                        let method = match variant {
                            TempVariant::Baseline => Method::OdinTempOnly { tau },
                            TempVariant::Odin => Method::Odin { epsilon, tau },
                        };
                        let scores = self.score(&models, &method)?;
                        let (report, bins) =
                            evaluate(&scores.rows, &fingerprint, self.config.ece_bins)?;
                        points.push(TempPoint {
                            seed,
                            variant,
                            tau,
                            auroc: report.auroc,
                            ece: report.ece.expect("softmax scores have an ECE"),
                            bins: bins.expect("softmax scores have bins"),
                        });
                    }
                }
                Ok(points)
            })
            .collect();
        let mut points = Vec::new();
        for p in per_seed {
            points.extend(p?);
        }
        let mut binary_checks = Vec::new();
        if self.bench.train.num_classes() == 2 {
            for &seed in &self.config.seeds {
                for variant in [TempVariant::Baseline, TempVariant::Odin] {
                    let values: Vec<f64> = points
                        .iter()
                        .filter(|p| p.seed == seed && p.variant == variant)
                        .map(|p| p.auroc)
                        .collect();
                    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
                    let gap = hi - lo;
                    binary_checks.push(BinaryCheck {
                        seed,
                        variant,
                        auroc_gap: gap,
                        passed: gap <= BINARY_AUROC_TOLERANCE,
                    });
                }
            }
        }
        Ok(TempSweep {
            epsilon,
            points,
            binary_checks,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolStatus {
    Ok,
    NotApplicable,
    Failed,
}

/// One row of the pooling ablation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolRow {
    pub seed: u64,
    pub pool: Option<PoolSpec>,
    pub feature_shape: Option<[usize; 3]>,
    pub feature_dim: Option<usize>,
    pub auroc: Option<f64>,
    pub status: PoolStatus,
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolSweep {
    pub rows: Vec<PoolRow>,
}

pub fn pool_name(pool: &Option<PoolSpec>) -> String {
    match pool {
        None => "none".into(),
        Some(p) => format!("{}x{} stride {}", p.kernel[0], p.kernel[1], p.stride),
    }
}

impl PoolSweep {
    pub fn failed(&self) -> bool {
        self.rows.iter().any(|r| r.status == PoolStatus::Failed)
    }

    pub fn to_markdown(&self) -> String {
        let mut s =
            String::from("| Seed | Pooling | Features | Dim | AUROC |\n|---|---|---|---|---|\n");
        for r in &self.rows {
            let shape = r
                .feature_shape
                .map(|[c, h, w]| format!("{c}x{h}x{w}"))
                .unwrap_or_else(|| "-".into());
            let dim = r
                .feature_dim
                .map(|d| d.to_string())
                .unwrap_or_else(|| "-".into());
            let auroc = match (r.status, r.auroc) {
                (PoolStatus::Ok, Some(a)) => format!("{a:.4}"),
                (PoolStatus::NotApplicable, _) => "n/a".into(),
                _ => "failed".into(),
            };
            s.push_str(&format!(
                "| {} | {} | {shape} | {dim} | {auroc} |\n",
                r.seed,
                pool_name(&r.pool)
            ));
        }
        s
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = dir.join("pooling.json");
        std::fs::write(&json, serde_json::to_string_pretty(self)?)
            .map_err(|e| Error::io(&json, e))?;
        let md = dir.join("pooling.md");
        std::fs::write(&md, self.to_markdown()).map_err(|e| Error::io(&md, e))
    }
}

impl Runner<'_> {
    /// Mahalanobis AUROC and fitted feature size for each pooling choice.
    pub fn sweep_pooling(&self, pools: &[Option<PoolSpec>]) -> Result<PoolSweep> {
        let per_seed: Vec<Vec<PoolRow>> = self
            .config
            .seeds
            .par_iter()
            .map(|&seed| {
                let models = self.train_seed(&[Method::Mcp], seed);
                let layout = self.config.model.feature_map;
                pools
                    .iter()
                    .map(|pool| {
                        let mut row = PoolRow {
                            seed,
                            pool: *pool,
                            feature_shape: None,
                            feature_dim: None,
                            auroc: None,
                            status: PoolStatus::Ok,
                            note: None,
                        };
                        let shape = match (pool, layout) {
                            (None, Some(l)) => Some(l),
                            (None, None) => None,
                            (Some(_), None) => {
                                row.status = PoolStatus::NotApplicable;
                                row.note = Some("features have no spatial layout".into());
                                return row;
                            }
                            (Some(p), Some([c, h, w])) => match p.output_hw(h, w) {
                                Ok((oh, ow)) => Some([c, oh, ow]),
                                Err(e) => {
                                    row.status = PoolStatus::NotApplicable;
                                    row.note = Some(e.to_string());
                                    return row;
                                }
                            },
                        };
                        row.feature_shape = shape;
                        row.feature_dim = Some(match shape {
                            Some([c, h, w]) => c * h * w,
                            None => self.config.model_for(&self.bench, seed).feature_dim(),
                        });
                        let result = self
                            .score(&models, &Method::Mahalanobis { pool: *pool })
                            .and_then(|s| auroc(&s.rows));
                        match result {
                            Ok(a) => row.auroc = Some(a),
                            Err(e) => {
                                row.status = PoolStatus::Failed;
                                row.note = Some(e.to_string());
                            }
                        }
                        row
                    })
                    .collect()
            })
            .collect();
        Ok(PoolSweep {
            rows: per_seed.into_iter().flatten().collect(),
        })
    }
}
