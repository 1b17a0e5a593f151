use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{
    gen_gaussian_benchmark, gen_moons_benchmark, ingest_csv, CsvSchema, GaussianSpec, Ingested,
    LabeledSet, Manifest, MoonsSpec, OodBenchmark, Separation,
};
use crate::error::{Error, Result};
use crate::metrics::DEFAULT_ECE_BINS;
use crate::nn::{DuqConfig, MlpConfig};
use crate::scores::{Consensus, PoolSpec};

/// Where the ID/OOD data comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "generator", rename_all = "snake_case")]
pub enum BenchmarkConfig {
    Gaussian(GaussianSpec),
    Moons(MoonsSpec),
    Csv(CsvBenchmark),
}

/// Pre-split tabular files with columns `x0..`, plus `label` for the
/// labeled splits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvBenchmark {
    pub train: PathBuf,
    pub test_id: PathBuf,
    pub test_ood: PathBuf,
    pub dim: usize,
    #[serde(default)]
    pub num_classes: Option<usize>,
    #[serde(default = "yes")]
    pub normalize: bool,
    #[serde(default = "overlapping")]
    pub separation: Separation,
}

fn yes() -> bool {
    true
}

fn overlapping() -> Separation {
    Separation::Overlapping
}

impl BenchmarkConfig {
    /// Builds the benchmark, resolving relative CSV paths against `base`.
    pub fn load(&self, base: &Path) -> Result<OodBenchmark> {
        match self {
            BenchmarkConfig::Gaussian(spec) => gen_gaussian_benchmark(spec),
            BenchmarkConfig::Moons(spec) => gen_moons_benchmark(spec),
            BenchmarkConfig::Csv(c) => c.load(base),
        }
    }
}

impl CsvBenchmark {
    fn load(&self, base: &Path) -> Result<OodBenchmark> {
        let labeled = |p: &Path| -> Result<LabeledSet> {
            let mut schema = CsvSchema::default_names(self.dim, true);
            schema.num_classes = self.num_classes;
            match ingest_csv(&base.join(p), &schema)? {
                Ingested::Labeled(set) => Ok(set),
                Ingested::Unlabeled(_) => {
                    Err(Error::Usage(format!("{} has no labels", p.display())))
                }
            }
        };
        let train = labeled(&self.train)?;
        let mut test_id = labeled(&self.test_id)?;
        if test_id.num_classes() != train.num_classes() {
            test_id = LabeledSet::new(
                test_id.features().clone(),
                test_id.labels().to_vec(),
                train.num_classes(),
            )?;
        }
        let test_ood = match ingest_csv(
            &base.join(&self.test_ood),
            &CsvSchema::default_names(self.dim, false),
        )? {
            Ingested::Unlabeled(t) => t,
            Ingested::Labeled(set) => set.features().clone(),
        };
        let bench = OodBenchmark {
            train,
            test_id,
            test_ood,
            separation: self.separation,
            seed: 0,
            manifest: Manifest {
                generator: "csv".into(),
                args: serde_json::to_value(self)?,
                seed: 0,
            },
        };
        if self.normalize {
            bench.normalize()
        } else {
            Ok(bench)
        }
    }
}

/// A scalar or a list of values, expanded into one run per value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum OneOrMany {
    One(f64),
    Many(Vec<f64>),
}

impl OneOrMany {
    pub fn values(&self) -> Vec<f64> {
        match self {
            OneOrMany::One(v) => vec![*v],
            OneOrMany::Many(v) => v.clone(),
        }
    }
}

fn default_epsilon() -> OneOrMany {
    OneOrMany::One(0.01)
}

fn default_tau() -> OneOrMany {
    OneOrMany::One(1000.0)
}

fn default_passes() -> usize {
    32
}

fn default_members() -> usize {
    5
}

/// One `[[methods]]` entry as written in the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum MethodSpec {
    Mcp {},
    Mahalanobis {
        #[serde(default)]
        pool: Option<PoolSpec>,
    },
    Odin {
        #[serde(default = "default_epsilon")]
        epsilon: OneOrMany,
        #[serde(default = "default_tau")]
        tau: OneOrMany,
    },
    OdinPertOnly {
        #[serde(default = "default_epsilon")]
        epsilon: OneOrMany,
    },
    OdinTempOnly {
        #[serde(default = "default_tau")]
        tau: OneOrMany,
    },
    Mcdp {
        #[serde(default = "default_passes")]
        n_passes: usize,
    },
    Ensemble {
        #[serde(default = "default_members")]
        members: usize,
    },
    MahalanobisEnsemble {
        #[serde(default = "default_members")]
        members: usize,
        #[serde(default)]
        consensus: Consensus,
        #[serde(default)]
        pool: Option<PoolSpec>,
    },
    Duq {
        #[serde(default)]
        embedding_dim: Option<usize>,
        #[serde(default)]
        length_scale: Option<f64>,
        #[serde(default)]
        centroid_momentum: Option<f64>,
        #[serde(default)]
        penalty_weight: Option<f64>,
        #[serde(default)]
        lr: Option<f64>,
    },
}

/// A fully resolved scoring method.
#[derive(Debug, Clone, PartialEq)]
pub enum Method {
    Mcp,
    Mahalanobis {
        pool: Option<PoolSpec>,
    },
    Odin {
        epsilon: f64,
        tau: f64,
    },
    OdinPertOnly {
        epsilon: f64,
    },
    OdinTempOnly {
        tau: f64,
    },
    Mcdp {
        n_passes: usize,
    },
    Ensemble {
        members: usize,
    },
    MahalanobisEnsemble {
        members: usize,
        consensus: Consensus,
        pool: Option<PoolSpec>,
    },
    Duq(DuqConfig),
}

fn pool_label(pool: &Option<PoolSpec>) -> Option<String> {
    pool.map(|p| format!("pool={}x{}s{}", p.kernel[0], p.kernel[1], p.stride))
}

impl Method {
    /// Stable identifier, `family` or `family[k=v;...]`.
    pub fn label(&self) -> String {
        let (family, params): (&str, Vec<String>) = match self {
            Method::Mcp => ("mcp", vec![]),
            Method::Mahalanobis { pool } => ("mahalanobis", pool_label(pool).into_iter().collect()),
            Method::Odin { epsilon, tau } => {
                ("odin", vec![format!("eps={epsilon}"), format!("tau={tau}")])
            }
            Method::OdinPertOnly { epsilon } => ("odin_pert_only", vec![format!("eps={epsilon}")]),
            Method::OdinTempOnly { tau } => ("odin_temp_only", vec![format!("tau={tau}")]),
            Method::Mcdp { n_passes } => ("mcdp", vec![format!("passes={n_passes}")]),
            Method::Ensemble { members } => ("ensemble", vec![format!("members={members}")]),
            Method::MahalanobisEnsemble {
                members,
                consensus,
                pool,
            } => {
                let mut p = vec![
                    format!("members={members}"),
                    format!("consensus={consensus:?}").to_lowercase(),
                ];
                p.extend(pool_label(pool));
                ("mahalanobis_ensemble", p)
            }
            Method::Duq(_) => ("duq", vec![]),
        };
        if params.is_empty() {
            family.to_string()
        } else {
            format!("{family}[{}]", params.join(";"))
        }
    }

    /// Ensemble size, counting the shared base model as member 0.
    pub fn ensemble_members(&self) -> usize {
        match self {
            Method::Ensemble { members } | Method::MahalanobisEnsemble { members, .. } => *members,
            _ => 0,
        }
    }

    pub fn needs_base_model(&self) -> bool {
        !matches!(self, Method::Duq(_))
    }
}

impl MethodSpec {
    pub fn expand(&self) -> Result<Vec<Method>> {
        let nonempty = |v: Vec<f64>, what: &str| {
            if v.is_empty() {
                Err(Error::Config(format!("{what} list is empty")))
            } else {
                Ok(v)
            }
        };
        Ok(match self {
            MethodSpec::Mcp {} => vec![Method::Mcp],
            MethodSpec::Mahalanobis { pool } => vec![Method::Mahalanobis { pool: *pool }],
            MethodSpec::Odin { epsilon, tau } => {
                let taus = nonempty(tau.values(), "tau")?;
                nonempty(epsilon.values(), "epsilon")?
                    .into_iter()
                    .flat_map(|e| {
                        taus.iter()
                            .map(move |&t| Method::Odin { epsilon: e, tau: t })
                    })
                    .collect()
            }
            MethodSpec::OdinPertOnly { epsilon } => nonempty(epsilon.values(), "epsilon")?
                .into_iter()
                .map(|epsilon| Method::OdinPertOnly { epsilon })
                .collect(),
            MethodSpec::OdinTempOnly { tau } => nonempty(tau.values(), "tau")?
                .into_iter()
                .map(|tau| Method::OdinTempOnly { tau })
                .collect(),
            MethodSpec::Mcdp { n_passes } => vec![Method::Mcdp {
                n_passes: *n_passes,
            }],
            MethodSpec::Ensemble { members } => vec![Method::Ensemble { members: *members }],
            MethodSpec::MahalanobisEnsemble {
                members,
                consensus,
                pool,
            } => vec![Method::MahalanobisEnsemble {
                members: *members,
                consensus: *consensus,
                pool: *pool,
            }],
            MethodSpec::Duq {
                embedding_dim,
                length_scale,
                centroid_momentum,
                penalty_weight,
                lr,
            } => {
                let mut duq = DuqConfig {
                    embedding_dim: *embedding_dim,
                    length_scale: *length_scale,
                    ..DuqConfig::default()
                };
                if let Some(m) = centroid_momentum {
                    duq.centroid_momentum = *m;
                }
                if let Some(w) = penalty_weight {
                    duq.penalty_weight = *w;
                }
                if let Some(lr) = lr {
                    duq.lr = *lr;
                }
                vec![Method::Duq(duq)]
            }
        })
    }
}

fn default_taus() -> Vec<f64> {
    vec![1.0, 5.0, 1000.0]
}

fn default_pools() -> Vec<Option<PoolSpec>> {
    vec![
        None,
        Some(PoolSpec::new(1, 1, 1)),
        Some(PoolSpec::new(2, 2, 2)),
        Some(PoolSpec::new(2, 2, 4)),
    ]
}

fn default_bins() -> usize {
    DEFAULT_ECE_BINS
}

/// Parameters of the temperature and pooling ablations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    #[serde(default = "default_taus")]
    pub taus: Vec<f64>,
    /// Perturbation size for the ODIN curves of the temperature sweep.
    #[serde(default = "odin_sweep_epsilon")]
    pub epsilon: f64,
    /// An entry without `kernel`/`stride` means "no pooling".
    #[serde(default = "default_pools", with = "pool_list")]
    pub pools: Vec<Option<PoolSpec>>,
}

fn odin_sweep_epsilon() -> f64 {
    0.01
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            taus: default_taus(),
            epsilon: odin_sweep_epsilon(),
            pools: default_pools(),
        }
    }
}

mod pool_list {
    use super::PoolSpec;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(deny_unknown_fields)]
    struct Entry {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        kernel: Option<[usize; 2]>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        stride: Option<usize>,
    }

    pub fn serialize<S: Serializer>(v: &[Option<PoolSpec>], s: S) -> Result<S::Ok, S::Error> {
        v.iter()
            .map(|p| Entry {
                kernel: p.map(|p| p.kernel),
                stride: p.map(|p| p.stride),
            })
            .collect::<Vec<_>>()
            .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Option<PoolSpec>>, D::Error> {
        Vec::<Entry>::deserialize(d)?
            .into_iter()
            .map(|e| match (e.kernel, e.stride) {
                (None, None) => Ok(None),
                (Some(kernel), Some(stride)) => Ok(Some(PoolSpec { kernel, stride })),
                _ => Err(serde::de::Error::custom(
                    "pool entries need both kernel and stride",
                )),
            })
            .collect()
    }
}

/// A complete experiment: data, model, methods and seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub benchmark: BenchmarkConfig,
    /// Architecture and optimizer; `input_dim`, `num_classes` and `seed`
    /// are filled in from the data and the run seed.
    #[serde(default)]
    pub model: MlpConfig,
    pub methods: Vec<MethodSpec>,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default = "default_bins")]
    pub ece_bins: usize,
    #[serde(default)]
    pub sweep: SweepConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            return Err(Error::Config("at least one method is required".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.ece_bins == 0 {
            return Err(Error::Config("ece_bins must be positive".into()));
        }
        let methods = self.resolved_methods()?;
        for m in &methods {
            match m {
                Method::Ensemble { members } | Method::MahalanobisEnsemble { members, .. }
                    if *members == 0 =>
                {
                    return Err(Error::Config("ensembles need at least one member".into()));
                }
                Method::Mcdp { n_passes: 0 } => {
                    return Err(Error::Config("mcdp needs at least one pass".into()));
                }
                Method::Odin { epsilon, .. } | Method::OdinPertOnly { epsilon }
                    if epsilon.is_nan() || *epsilon < 0.0 =>
                {
                    return Err(Error::Config(format!(
                        "epsilon must be >= 0, got {epsilon}"
                    )));
                }
                Method::Odin { tau, .. } | Method::OdinTempOnly { tau }
                    if tau.is_nan() || *tau <= 0.0 =>
                {
                    return Err(Error::Config(format!("tau must be > 0, got {tau}")));
                }
                Method::Duq(d) => d.validate().map_err(|e| Error::Config(e.to_string()))?,
                _ => {}
            }
        }
        let mut labels: Vec<String> = methods.iter().map(Method::label).collect();
        labels.sort();
        if let Some(w) = labels.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::Config(format!("method {} listed twice", w[0])));
        }
        Ok(())
    }

    /// Every method point in config order.
    pub fn resolved_methods(&self) -> Result<Vec<Method>> {
        let mut out = Vec::new();
        for spec in &self.methods {
            out.extend(spec.expand()?);
        }
        Ok(out)
    }

    /// SHA-256 of the canonical JSON form, ignoring the output directory.
    pub fn fingerprint(&self) -> String {
        let mut canonical = self.clone();
        canonical.output_dir = None;
        let json = serde_json::to_vec(&canonical).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }

    /// Model config for one seed on a given benchmark.
    pub fn model_for(&self, bench: &OodBenchmark, seed: u64) -> MlpConfig {
        MlpConfig {
            input_dim: bench.dim(),
            num_classes: bench.train.num_classes(),
            seed,
            ..self.model.clone()
        }
    }
}
