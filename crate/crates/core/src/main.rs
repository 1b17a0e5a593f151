use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use oodbench::data::{write_labeled_csv, write_matrix_csv};
use oodbench::harness::{BenchmarkConfig, ExperimentConfig, Method, Runner, SeedModels};
use oodbench::metrics::evaluate;
use oodbench::nn::{Checkpoint, Classifier, DuqModel, Model};
use oodbench::scores::{read_scores_csv, write_scores_csv};
use oodbench::Error;

#[derive(Parser)]
#[command(
    name = "oodbench",
    version,
    about = "Confidence-based OOD detection test-bed"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Csv,
    Md,
}

#[derive(clap::Args)]
struct Common {
    /// Experiment config (TOML)
    #[arg(long)]
    config: PathBuf,
    /// Run only this seed instead of the configured list
    #[arg(long)]
    seed: Option<u64>,
    /// Output location; defaults to the config's `output_dir`, then `out`
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the benchmark's train/test CSVs and manifest
    Gen(Common),
    /// Train one model and save its checkpoint
    Train {
        #[command(flatten)]
        common: Common,
        /// Train the DUQ model of the first `duq` method instead of the classifier
        #[arg(long)]
        duq: bool,
    },
    /// Score the test sets with one configured method
    Score {
        #[command(flatten)]
        common: Common,
        /// Method label (e.g. `odin[eps=0.01;tau=1000]`) or unique family name
        #[arg(long)]
        method: String,
        /// Use this checkpoint instead of training
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Compute metrics from a scores CSV
    Eval {
        #[arg(long)]
        scores: PathBuf,
        /// Config whose fingerprint is stamped into the report
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write reliability bins here
        #[arg(long)]
        bins: Option<PathBuf>,
    },
    /// Run every configured method over every seed
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "md")]
        format: Format,
    },
    /// Calibration and AUROC across temperatures
    SweepTemp(Common),
    /// Mahalanobis AUROC across pooling choices
    SweepPool {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "md")]
        format: Format,
    },
}

/// A finished command that may still have failed cells.
struct Outcome {
    any_failed: bool,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_)
        | Error::Parse { .. }
        | Error::Json(_)
        | Error::Csv(_)
        | Error::Checkpoint(_) => 2,
        _ => 1,
    }
}

fn load(common: &Common) -> Result<(ExperimentConfig, PathBuf, PathBuf), Error> {
    let mut config = ExperimentConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        config.seeds = vec![seed];
    }
    let base = common
        .config
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_default();
    let out = common
        .out
        .clone()
        .or_else(|| config.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    Ok((config, base, out))
}

fn write(path: &Path, body: &str) -> Result<(), Error> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
    }
    std::fs::write(path, body).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn find_method(config: &ExperimentConfig, name: &str) -> Result<Method, Error> {
    let methods = config.resolved_methods()?;
    if let Some(m) = methods.iter().find(|m| m.label() == name) {
        return Ok(m.clone());
    }
    let matches: Vec<&Method> = methods
        .iter()
        .filter(|m| m.label().split('[').next() == Some(name))
        .collect();
    match matches.as_slice() {
        [m] => Ok((*m).clone()),
        [] => Err(Error::Config(format!(
            "method `{name}` is not in the config"
        ))),
        _ => Err(Error::Config(format!(
            "`{name}` matches several configured methods; give the full label"
        ))),
    }
}

fn gen(common: &Common) -> Result<Outcome, Error> {
    let (mut config, base, out) = load(common)?;
    if let Some(seed) = common.seed {
        match &mut config.benchmark {
            BenchmarkConfig::Gaussian(s) => s.seed = seed,
            BenchmarkConfig::Moons(s) => s.seed = seed,
            BenchmarkConfig::Csv(_) => {}
        }
    }
    let bench = config.benchmark.load(&base)?;
    std::fs::create_dir_all(&out).map_err(|e| Error::Io {
        path: out.clone(),
        source: e,
    })?;
    write_labeled_csv(&out.join("train.csv"), &bench.train)?;
    write_labeled_csv(&out.join("test_id.csv"), &bench.test_id)?;
    write_matrix_csv(&out.join("test_ood.csv"), &bench.test_ood)?;
    write(
        &out.join("manifest.json"),
        &serde_json::to_string_pretty(&bench.manifest)?,
    )?;
    println!("wrote benchmark to {}", out.display());
    Ok(Outcome { any_failed: false })
}

fn train(common: &Common, duq: bool) -> Result<Outcome, Error> {
    let (config, base, out) = load(common)?;
    let runner = Runner::new(&config, &base)?;
    let seed = config.seeds[0];
    let model = if duq {
        let method = config
            .resolved_methods()?
            .into_iter()
            .find(|m| matches!(m, Method::Duq(_)))
            .ok_or_else(|| Error::Config("no duq method configured".into()))?;
        let Method::Duq(duq_config) = method else {
            unreachable!()
        };
        let mut m = DuqModel::new(config.model_for(&runner.bench, seed), &duq_config)?;
        m.train(&runner.bench.train)?;
        Model::Duq(m)
    } else {
        let mut clf = Classifier::new(config.model_for(&runner.bench, seed))?;
        clf.train(&runner.bench.train)?;
        Model::Mlp(clf)
    };
    let path = if out.extension().is_some() {
        out
    } else {
        out.join(format!("checkpoint_seed{seed}.json"))
    };
    write(&path, &Checkpoint::new(model).to_json()?)?;
    println!("wrote {}", path.display());
    Ok(Outcome { any_failed: false })
}

fn score(common: &Common, method: &str, checkpoint: Option<&Path>) -> Result<Outcome, Error> {
    let (config, base, out) = load(common)?;
    let method = find_method(&config, method)?;
    let runner = Runner::new(&config, &base)?;
    let seed = config.seeds[0];
    let models = match checkpoint {
        None => runner.train_seed(std::slice::from_ref(&method), seed),
        Some(p) => {
            let ckpt = Checkpoint::load(p)?;
            let mut models = SeedModels {
                seed,
                base: None,
                members: Vec::new(),
                duq: Vec::new(),
            };
            match (ckpt.model, &method) {
                (Model::Duq(m), Method::Duq(c)) => models.duq.push((c.clone(), Ok(m))),
                (Model::Mlp(c), m) if m.ensemble_members() <= 1 && m.needs_base_model() => {
                    models.base = Some(Ok(c))
                }
                _ => {
                    return Err(Error::Usage(format!(
                        "checkpoint cannot serve method {}",
                        method.label()
                    )))
                }
            }
            models
        }
    };
    let scores = runner.score(&models, &method)?;
    for n in &scores.notices {
        eprintln!("notice: {n}");
    }
    let path = if out.extension().is_some() {
        out
    } else {
        out.join("scores.csv")
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
    }
    write_scores_csv(&path, &scores.rows)?;
    println!("wrote {}", path.display());
    Ok(Outcome { any_failed: false })
}

fn eval(
    scores: &Path,
    config: Option<&Path>,
    out: Option<&Path>,
    bins: Option<&Path>,
) -> Result<Outcome, Error> {
    let (fingerprint, n_bins) = match config {
        Some(p) => {
            let c = ExperimentConfig::load(p)?;
            (c.fingerprint(), c.ece_bins)
        }
        None => (String::new(), oodbench::metrics::DEFAULT_ECE_BINS),
    };
    let rows = read_scores_csv(scores)?;
    let (report, reliability) = evaluate(&rows, &fingerprint, n_bins)?;
    let json = serde_json::to_string_pretty(&report)?;
    match out {
        Some(p) => write(p, &json)?,
        None => println!("{json}"),
    }
    if let (Some(p), Some(b)) = (bins, reliability) {
        b.write_csv(p)?;
    }
    Ok(Outcome { any_failed: false })
}

fn bench(common: &Common, format: Format) -> Result<Outcome, Error> {
    let (config, base, out) = load(common)?;
    let report = Runner::new(&config, &base)?.run()?;
    report.write(&out)?;
    match format {
        Format::Json => println!("{}", report.to_json()?),
        Format::Csv => print!("{}", report.to_csv()?),
        Format::Md => print!("{}", report.to_markdown()),
    }
    for c in report.cells.iter().filter(|c| c.error.is_some()) {
        eprintln!(
            "seed {} {}: {}",
            c.seed,
            c.method,
            c.error.as_deref().unwrap_or_default()
        );
    }
    Ok(Outcome {
        any_failed: report.any_failed(),
    })
}

fn sweep_temp(common: &Common) -> Result<Outcome, Error> {
    let (config, base, out) = load(common)?;
    let runner = Runner::new(&config, &base)?;
    let sweep = runner.sweep_temperature(&config.sweep.taus, config.sweep.epsilon)?;
    sweep.write(&out)?;
    println!("seed,variant,tau,auroc,ece");
    for p in &sweep.points {
        println!(
            "{},{:?},{},{:.6},{:.6}",
            p.seed, p.variant, p.tau, p.auroc, p.ece
        );
    }
    for c in sweep.binary_checks.iter().filter(|c| !c.passed) {
        eprintln!(
            "seed {} {:?}: AUROC varies across temperatures by {:e}",
            c.seed, c.variant, c.auroc_gap
        );
    }
    Ok(Outcome {
        any_failed: sweep.failed(),
    })
}

fn sweep_pool(common: &Common, format: Format) -> Result<Outcome, Error> {
    let (config, base, out) = load(common)?;
    let runner = Runner::new(&config, &base)?;
    let sweep = runner.sweep_pooling(&config.sweep.pools)?;
    sweep.write(&out)?;
    match format {
        Format::Json => println!("{}", serde_json::to_string_pretty(&sweep)?),
        Format::Csv | Format::Md => print!("{}", sweep.to_markdown()),
    }
    Ok(Outcome {
        any_failed: sweep.failed(),
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Gen(c) => gen(c),
        Command::Train { common, duq } => train(common, *duq),
        Command::Score {
            common,
            method,
            checkpoint,
        } => score(common, method, checkpoint.as_deref()),
        Command::Eval {
            scores,
            config,
            out,
            bins,
        } => eval(scores, config.as_deref(), out.as_deref(), bins.as_deref()),
        Command::Bench { common, format } => bench(common, *format),
        Command::SweepTemp(c) => sweep_temp(c),
        Command::SweepPool { common, format } => sweep_pool(common, *format),
    };
    match result {
        Ok(Outcome { any_failed: false }) => ExitCode::SUCCESS,
        Ok(Outcome { any_failed: true }) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
