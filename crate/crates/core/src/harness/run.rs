use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, Method};
use crate::data::OodBenchmark;
use crate::error::{Error, Result};
use crate::metrics::{evaluate, EvalReport, ReliabilityBins, ORIENTATION};
use crate::nn::{Classifier, DuqConfig, DuqModel};
use crate::scores::{
    duq_score, ensemble_score, fit_gaussian_stats, label_scores, mahalanobis_score, mcdp_score,
    mcp_score, odin_score, EnsembleMember, EnsembleVariant, GaussianStats, ScoreBatch,
    ScoredSample,
};

const MCDP_STREAM: u64 = 4;

/// Training seed of extra ensemble member `k ≥ 1`.
pub fn member_seed(seed: u64, k: usize) -> u64 {
    seed ^ (k as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// One model to train.
#[derive(Debug, Clone, PartialEq)]
pub enum Job {
    /// Softmax classifier shared by every post-hoc method and MC dropout;
    /// also ensemble member 0.
    Base {
        seed: u64,
    },
    Member {
        seed: u64,
        k: usize,
    },
    Duq {
        seed: u64,
        config: DuqConfig,
    },
}

/// The minimal set of training jobs covering `methods` for one seed.
pub fn plan_jobs(methods: &[Method], seed: u64) -> Vec<Job> {
    let mut jobs = Vec::new();
    if methods.iter().any(Method::needs_base_model) {
        jobs.push(Job::Base { seed });
    }
    let members = methods
        .iter()
        .map(Method::ensemble_members)
        .max()
        .unwrap_or(0);
    jobs.extend((1..members).map(|k| Job::Member { seed, k }));
    for m in methods {
        if let Method::Duq(config) = m {
            let job = Job::Duq {
                seed,
                config: config.clone(),
            };
            if !jobs.contains(&job) {
                jobs.push(job);
            }
        }
    }
    jobs
}

enum Trained {
    Classifier(Classifier),
    Duq(DuqModel),
}

/// Models trained for one seed.
pub struct SeedModels {
    pub seed: u64,
    pub base: Option<Result<Classifier, String>>,
    pub members: Vec<Result<Classifier, String>>,
    pub duq: Vec<(DuqConfig, Result<DuqModel, String>)>,
}

impl SeedModels {
    fn base(&self) -> Result<&Classifier> {
        match &self.base {
            Some(Ok(c)) => Ok(c),
            Some(Err(e)) => Err(Error::Fit(format!("base model training failed: {e}"))),
            None => Err(Error::Usage("no base model was planned".into())),
        }
    }

    fn ensemble(&self, size: usize) -> Result<Vec<&Classifier>> {
        let mut out = vec![self.base()?];
        for k in 1..size {
            match self.members.get(k - 1) {
                Some(Ok(c)) => out.push(c),
                Some(Err(e)) => {
                    return Err(Error::Fit(format!(
                        "ensemble member {k} training failed: {e}"
                    )))
                }
                None => return Err(Error::Usage(format!("ensemble member {k} was not planned"))),
            }
        }
        Ok(out)
    }

    fn duq(&self, config: &DuqConfig) -> Result<&DuqModel> {
        match self.duq.iter().find(|(c, _)| c == config) {
            Some((_, Ok(m))) => Ok(m),
            Some((_, Err(e))) => Err(Error::Fit(format!("DUQ training failed: {e}"))),
            None => Err(Error::Usage("no DUQ model was planned".into())),
        }
    }
}

/// Trains models and evaluates methods on one benchmark.
pub struct Runner<'a> {
    pub config: &'a ExperimentConfig,
    pub bench: OodBenchmark,
    training_runs: AtomicUsize,
}

/// Scores of one method on the ID and OOD test sets.
#[derive(Debug, Clone)]
pub struct CellScores {
    pub rows: Vec<ScoredSample>,
    pub notices: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellStatus {
    Ok,
    Failed,
}

/// Outcome of one `(seed, method)` cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub seed: u64,
    pub method: String,
    pub status: CellStatus,
    pub report: Option<EvalReport>,
    pub error: Option<String>,
    pub notices: Vec<String>,
    #[serde(skip)]
    pub bins: Option<ReliabilityBins>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_fingerprint: String,
    pub library_version: String,
    pub orientation: String,
    pub training_runs: usize,
    pub wall_clock_seconds: f64,
}

/// Mean of each metric over the seeds where the method succeeded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub method: String,
    pub n_ok: usize,
    pub n_failed: usize,
    pub auroc: Option<f64>,
    pub aucpr: Option<f64>,
    pub id_accuracy: Option<f64>,
    pub ece: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub provenance: Provenance,
    pub cells: Vec<Cell>,
    pub aggregate: Vec<Aggregate>,
}

fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

impl RunReport {
    pub fn any_failed(&self) -> bool {
        self.cells.iter().any(|c| c.status == CellStatus::Failed)
    }

    pub fn cell(&self, seed: u64, method: &str) -> Option<&Cell> {
        self.cells
            .iter()
            .find(|c| c.seed == seed && c.method == method)
    }

    pub fn aggregate_for(&self, method: &str) -> Option<&Aggregate> {
        self.aggregate.iter().find(|a| a.method == method)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// JSON with the wall-clock field zeroed, for reproducibility checks.
    pub fn to_json_without_timing(&self) -> Result<String> {
        let mut r = self.clone();
        r.provenance.wall_clock_seconds = 0.0;
        r.to_json()
    }

    fn aggregate(cells: &[Cell], methods: &[String]) -> Vec<Aggregate> {
        methods
            .iter()
            .map(|m| {
                let ok: Vec<&EvalReport> = cells
                    .iter()
                    .filter(|c| &c.method == m)
                    .filter_map(|c| c.report.as_ref())
                    .collect();
                let n_failed = cells
                    .iter()
                    .filter(|c| &c.method == m && c.report.is_none())
                    .count();
                let pick =
                    |f: fn(&EvalReport) -> f64| mean(&ok.iter().map(|r| f(r)).collect::<Vec<_>>());
                let eces: Option<Vec<f64>> = ok.iter().map(|r| r.ece).collect();
                Aggregate {
                    method: m.clone(),
                    n_ok: ok.len(),
                    n_failed,
                    auroc: pick(|r| r.auroc),
                    aucpr: pick(|r| r.aucpr),
                    id_accuracy: pick(|r| r.id_accuracy),
                    ece: eces.and_then(|v| mean(&v)),
                }
            })
            .collect()
    }
}

impl<'a> Runner<'a> {
    /// Loads the benchmark; relative CSV paths resolve against `base_dir`.
    pub fn new(config: &'a ExperimentConfig, base_dir: &Path) -> Result<Self> {
        config.validate()?;
        let bench = config.benchmark.load(base_dir)?;
        Ok(Runner {
            config,
            bench,
            training_runs: AtomicUsize::new(0),
        })
    }

    /// Number of models trained so far.
    pub fn training_runs(&self) -> usize {
        self.training_runs.load(Ordering::SeqCst)
    }

    fn train_job(&self, job: &Job) -> Result<Trained> {
        self.training_runs.fetch_add(1, Ordering::SeqCst);
        let train = &self.bench.train;
        match job {
            Job::Base { seed } => {
                let mut clf = Classifier::new(self.config.model_for(&self.bench, *seed))?;
                clf.train(train)?;
                Ok(Trained::Classifier(clf))
            }
            Job::Member { seed, k } => {
                let mut clf =
                    Classifier::new(self.config.model_for(&self.bench, member_seed(*seed, *k)))?;
                clf.train(train)?;
                Ok(Trained::Classifier(clf))
            }
            Job::Duq { seed, config } => {
                let mut model = DuqModel::new(self.config.model_for(&self.bench, *seed), config)?;
                model.train(train)?;
                Ok(Trained::Duq(model))
            }
        }
    }

    /// Trains every model needed by `methods` for `seed`, in parallel.
    pub fn train_seed(&self, methods: &[Method], seed: u64) -> SeedModels {
        let jobs = plan_jobs(methods, seed);
        let results: Vec<Result<Trained>> = jobs.par_iter().map(|j| self.train_job(j)).collect();
        let mut models = SeedModels {
            seed,
            base: None,
            members: Vec::new(),
            duq: Vec::new(),
        };
        for (job, result) in jobs.into_iter().zip(results) {
            let result = result.map_err(|e| e.to_string());
            match job {
                Job::Base { .. } => {
                    models.base = Some(result.map(|t| match t {
                        Trained::Classifier(c) => c,
                        Trained::Duq(_) => unreachable!("base job trains a classifier"),
                    }))
                }
                Job::Member { .. } => models.members.push(result.map(|t| match t {
                    Trained::Classifier(c) => c,
                    Trained::Duq(_) => unreachable!("member job trains a classifier"),
                })),
                Job::Duq { config, .. } => models.duq.push((
                    config,
                    result.map(|t| match t {
                        Trained::Duq(m) => m,
                        Trained::Classifier(_) => unreachable!("duq job trains a DUQ model"),
                    }),
                )),
            }
        }
        models
    }

    fn both(
        &self,
        f: impl Fn(&crate::autodiff::Tensor) -> Result<ScoreBatch>,
    ) -> Result<(ScoreBatch, ScoreBatch)> {
        Ok((f(self.bench.test_id.features())?, f(&self.bench.test_ood)?))
    }

    /// Scores the ID and OOD test sets with one method.
    pub fn score(&self, models: &SeedModels, method: &Method) -> Result<CellScores> {
        let train = &self.bench.train;
        let (id, ood) = match method {
            Method::Mcp => {
                let clf = models.base()?;
                self.both(|x| mcp_score(clf, x, 1.0))?
            }
            Method::Mahalanobis { pool } => {
                let clf = models.base()?;
                let stats = fit_gaussian_stats(clf, train, *pool)?;
                let (mut id, ood) = self.both(|x| mahalanobis_score(&stats, clf, x))?;
                id.notices.extend(stats.notices);
                (id, ood)
            }
            Method::Odin { epsilon, tau } => {
                let clf = models.base()?;
                self.both(|x| odin_score(clf, x, *epsilon, *tau))?
            }
            Method::OdinPertOnly { epsilon } => {
                let clf = models.base()?;
                self.both(|x| odin_score(clf, x, *epsilon, 1.0))?
            }
            Method::OdinTempOnly { tau } => {
                let clf = models.base()?;
                self.both(|x| odin_score(clf, x, 0.0, *tau))?
            }
            Method::Mcdp { n_passes } => {
                let clf = models.base()?;
                let mut rng = ChaCha8Rng::seed_from_u64(models.seed);
                rng.set_stream(MCDP_STREAM);
                let id = mcdp_score(clf, self.bench.test_id.features(), *n_passes, &mut rng)?;
                let ood = mcdp_score(clf, &self.bench.test_ood, *n_passes, &mut rng)?;
                (id, ood)
            }
            Method::Ensemble { members } => {
                let nets = models.ensemble(*members)?;
                let m: Vec<EnsembleMember> = nets
                    .iter()
                    .map(|c| EnsembleMember {
                        classifier: c,
                        stats: None,
                    })
                    .collect();
                self.both(|x| ensemble_score(&m, x, EnsembleVariant::Mcp))?
            }
            Method::MahalanobisEnsemble {
                members,
                consensus,
                pool,
            } => {
                let nets = models.ensemble(*members)?;
                let stats: Vec<GaussianStats> = nets
                    .iter()
                    .map(|c| fit_gaussian_stats(c, train, *pool))
                    .collect::<Result<_>>()?;
                let m: Vec<EnsembleMember> = nets
                    .iter()
                    .zip(&stats)
                    .map(|(c, s)| EnsembleMember {
                        classifier: c,
                        stats: Some(s),
                    })
                    .collect();
                self.both(|x| ensemble_score(&m, x, EnsembleVariant::Mahalanobis(*consensus)))?
            }
            Method::Duq(config) => {
                let model = models.duq(config)?;
                self.both(|x| duq_score(model, x))?
            }
        };
        let mut notices = id.notices.clone();
        for n in ood.notices.iter() {
            if !notices.contains(n) {
                notices.push(n.clone());
            }
        }
        let rows = label_scores(&method.label(), &id, self.bench.test_id.labels(), &ood)?;
        Ok(CellScores { rows, notices })
    }

    fn cell(&self, models: &SeedModels, method: &Method, fingerprint: &str) -> Cell {
        let label = method.label();
        let outcome = self.score(models, method).and_then(|s| {
            let (report, bins) = evaluate(&s.rows, fingerprint, self.config.ece_bins)?;
            Ok((report, bins, s.notices))
        });
        match outcome {
            Ok((report, bins, notices)) => Cell {
                seed: models.seed,
                method: label,
                status: CellStatus::Ok,
                report: Some(report),
                error: None,
                notices,
                bins,
            },
            Err(e) => Cell {
                seed: models.seed,
                method: label,
                status: CellStatus::Failed,
                report: None,
                error: Some(e.to_string()),
                notices: Vec::new(),
                bins: None,
            },
        }
    }

    /// Trains once per seed and evaluates every configured method.
    pub fn run(&self) -> Result<RunReport> {
        let start = Instant::now();
        let methods = self.config.resolved_methods()?;
        let fingerprint = self.config.fingerprint();
        let per_seed: Vec<Vec<Cell>> = self
            .config
            .seeds
            .par_iter()
            .map(|&seed| {
                let models = self.train_seed(&methods, seed);
                methods
                    .par_iter()
                    .map(|m| self.cell(&models, m, &fingerprint))
                    .collect()
            })
            .collect();
        let cells: Vec<Cell> = per_seed.into_iter().flatten().collect();
        let labels: Vec<String> = methods.iter().map(Method::label).collect();
        Ok(RunReport {
            provenance: Provenance {
                config_fingerprint: fingerprint,
                library_version: env!("CARGO_PKG_VERSION").to_string(),
                orientation: ORIENTATION.to_string(),
                training_runs: self.training_runs(),
                wall_clock_seconds: start.elapsed().as_secs_f64(),
            },
            aggregate: RunReport::aggregate(&cells, &labels),
            cells,
        })
    }
}

/// Loads the benchmark and runs the whole experiment.
pub fn run(config: &ExperimentConfig, base_dir: &Path) -> Result<RunReport> {
    Runner::new(config, base_dir)?.run()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scores::{Consensus, PoolSpec};

    #[test]
    fn post_hoc_methods_share_one_job() {
        let methods = [
            Method::Mcp,
            Method::Mahalanobis { pool: None },
            Method::Odin {
                epsilon: 0.01,
                tau: 1000.0,
            },
            Method::Mcdp { n_passes: 4 },
        ];
        assert_eq!(plan_jobs(&methods, 3), vec![Job::Base { seed: 3 }]);
    }

    #[test]
    fn ensembles_reuse_base_as_member_zero() {
        let methods = [
            Method::Ensemble { members: 3 },
            Method::MahalanobisEnsemble {
                members: 2,
                consensus: Consensus::Mean,
                pool: Some(PoolSpec::new(1, 1, 1)),
            },
        ];
        assert_eq!(
            plan_jobs(&methods, 0),
            vec![
                Job::Base { seed: 0 },
                Job::Member { seed: 0, k: 1 },
                Job::Member { seed: 0, k: 2 }
            ]
        );
    }

    #[test]
    fn duq_alone_trains_no_classifier() {
        let jobs = plan_jobs(&[Method::Duq(DuqConfig::default())], 1);
        assert_eq!(jobs.len(), 1);
        assert!(matches!(jobs[0], Job::Duq { .. }));
    }

    #[test]
    fn member_seeds_are_distinct() {
        let s: Vec<u64> = (1..6).map(|k| member_seed(0, k)).collect();
        let mut d = s.clone();
        d.sort();
        d.dedup();
        assert_eq!(d.len(), s.len());
        assert!(!s.contains(&0));
    }
}
