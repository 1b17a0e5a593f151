//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each
//! and exits non-zero when any criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use oodbench::autodiff::{Tape, Tensor, Var};
use oodbench::data::{gen_gaussian_benchmark, GaussianSpec};
use oodbench::harness::{ExperimentConfig, Method, RunReport, Runner, TempVariant};
use oodbench::metrics::{aucpr, auroc, ece};
use oodbench::nn::{cross_entropy, Classifier, DuqConfig, DuqHead, DuqModel, MlpConfig};
use oodbench::scores::{mahalanobis_score, GaussianStats, ScoredSample};

type Verdict = (bool, String);
type Criterion = (&'static str, fn() -> Verdict);

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(lo..hi)).collect(),
    )
    .unwrap()
}

// ---------------------------------------------------------------- gradcheck

type Build = dyn for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>;

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let den = norm(a).max(norm(b));
    if den < 1e-12 {
        num
    } else {
        num / den
    }
}

/// Largest relative error between tape gradients and central differences of
/// `Σ f(inputs) ⊙ W` for a fixed random `W`.
fn gradcheck(inputs: &[Tensor], f: &Build, rng: &mut ChaCha8Rng) -> f64 {
    let probe = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| probe.constant(t.clone())).collect();
    let out_shape = f(&probe, &vars).shape();
    let w = rand_tensor(rng, &out_shape, -1.0, 1.0);

    let value = |xs: &[Tensor]| -> f64 {
        let tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        f(&tape, &vars)
            .value()
            .data()
            .iter()
            .zip(w.data())
            .map(|(a, b)| a * b)
            .sum()
    };

    let tape = Tape::new();
    let params: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&tape, &params)
        .mul(&tape.constant(w.clone()))
        .unwrap()
        .sum()
        .unwrap();
    tape.backward(loss).unwrap();

    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (k, p) in params.iter().enumerate() {
        let analytic = p
            .grad()
            .map(|g| g.into_data())
            .unwrap_or_else(|| vec![0.0; inputs[k].numel()]);
        let numeric: Vec<f64> = (0..inputs[k].numel())
            .map(|i| {
                let mut plus = inputs.to_vec();
                plus[k].data_mut()[i] += h;
                let mut minus = inputs.to_vec();
                minus[k].data_mut()[i] -= h;
                (value(&plus) - value(&minus)) / (2.0 * h)
            })
            .collect();
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    worst
}

/// Values bounded away from the ReLU kink.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.random_range(0.05..1.0);
            if rng.random_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn criterion_gradcheck() -> Verdict {
    let ops: Vec<(&str, Box<Build>)> = vec![
        ("matmul", Box::new(|_, v| v[0].matmul(&v[1]).unwrap())),
        ("add", Box::new(|_, v| v[0].add(&v[2]).unwrap())),
        ("sub", Box::new(|_, v| v[0].sub(&v[2]).unwrap())),
        ("mul", Box::new(|_, v| v[0].mul(&v[2]).unwrap())),
        ("square", Box::new(|_, v| v[0].square().unwrap())),
        ("add_row", Box::new(|_, v| v[0].add_row(&v[3]).unwrap())),
        ("relu", Box::new(|_, v| v[4].relu().unwrap())),
        ("exp", Box::new(|_, v| v[0].exp().unwrap())),
        ("log", Box::new(|_, v| v[5].log().unwrap())),
        ("neg", Box::new(|_, v| v[0].neg().unwrap())),
        ("scale", Box::new(|_, v| v[0].scale(-2.5).unwrap())),
        (
            "add_scalar",
            Box::new(|_, v| v[0].add_scalar(0.75).unwrap().square().unwrap()),
        ),
        ("sum", Box::new(|_, v| v[0].sum().unwrap())),
        ("mean", Box::new(|_, v| v[0].mean().unwrap())),
        ("row_sums", Box::new(|_, v| v[0].row_sums().unwrap())),
        (
            "softmax_temp",
            Box::new(|_, v| v[0].softmax_temp(0.7).unwrap()),
        ),
        (
            "log_softmax_temp",
            Box::new(|_, v| v[0].log_softmax_temp(3.0).unwrap()),
        ),
        (
            "concat_cols",
            Box::new(|_, v| Var::concat_cols(&[v[0], v[2].exp().unwrap()]).unwrap()),
        ),
        (
            "scalar_broadcast",
            Box::new(|_, v| v[0].mul(&v[6]).unwrap().sub(&v[6]).unwrap()),
        ),
    ];
    let mut cases = 0;
    let mut worst: f64 = 0.0;
    let mut worst_name = "";
    for (name, op) in &ops {
        for seed in 0..6u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
            let (r, c, k) = (
                rng.random_range(1..5),
                rng.random_range(1..5),
                rng.random_range(1..5),
            );
            let inputs = vec![
                rand_tensor(&mut rng, &[r, c], -1.5, 1.5),
                rand_tensor(&mut rng, &[c, k], -1.5, 1.5),
                rand_tensor(&mut rng, &[r, c], -1.5, 1.5),
                rand_tensor(&mut rng, &[1, c], -1.5, 1.5),
                away_from_zero(&mut rng, &[r, c]),
                rand_tensor(&mut rng, &[r, c], 0.2, 3.0),
                Tensor::scalar(rng.random_range(-2.0..2.0)),
            ];
            let e = gradcheck(&inputs, op.as_ref(), &mut rng);
            cases += 1;
            if e > worst {
                worst = e;
                worst_name = name;
            }
        }
    }

    // random 3-layer MLP cross-entropy loss
    for seed in 0..30u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(5000 + seed);
        let b = rng.random_range(2..7);
        let d = rng.random_range(1..6);
        let h1 = rng.random_range(2..7);
        let h2 = rng.random_range(2..7);
        let classes = rng.random_range(2..5);
        let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..classes)).collect();
        let inputs = vec![
            rand_tensor(&mut rng, &[b, d], -2.0, 2.0),
            rand_tensor(&mut rng, &[d, h1], -1.0, 1.0),
            rand_tensor(&mut rng, &[1, h1], -0.5, 0.5),
            rand_tensor(&mut rng, &[h1, h2], -1.0, 1.0),
            rand_tensor(&mut rng, &[1, h2], -0.5, 0.5),
            rand_tensor(&mut rng, &[h2, classes], -1.0, 1.0),
            rand_tensor(&mut rng, &[1, classes], -0.5, 0.5),
        ];
        let mlp: Box<Build> = Box::new(move |_, v| {
            let a1 = v[0]
                .matmul(&v[1])
                .unwrap()
                .add_row(&v[2])
                .unwrap()
                .relu()
                .unwrap();
            let a2 = a1
                .matmul(&v[3])
                .unwrap()
                .add_row(&v[4])
                .unwrap()
                .relu()
                .unwrap();
            let logits = a2.matmul(&v[5]).unwrap().add_row(&v[6]).unwrap();
            cross_entropy(logits, &labels).unwrap()
        });
        let e = gradcheck(&inputs, mlp.as_ref(), &mut rng);
        cases += 1;
        if e > worst {
            worst = e;
            worst_name = "mlp_cross_entropy";
        }
    }
    (
        cases >= 100 && worst <= 1e-6,
        format!("{cases} cases, max rel err {worst:.2e} ({worst_name}), tol 1e-6"),
    )
}

// ------------------------------------------------------------ metric oracles

fn rows_from(scores: &[f64], is_ood: &[bool]) -> Vec<ScoredSample> {
    scores
        .iter()
        .zip(is_ood)
        .enumerate()
        .map(|(i, (&s, &o))| ScoredSample {
            sample_id: i,
            method: "m".into(),
            id_score: s,
            is_ood: o,
            predicted_class: 0,
            true_class: (!o).then_some(0),
        })
        .collect()
}

/// Fraction of (ID, OOD) pairs where the OOD sample scores lower, ties half.
fn pair_count_auroc(scores: &[f64], is_ood: &[bool]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if !is_ood[i] && is_ood[j] {
                pairs += 1.0;
                if sj < si {
                    wins += 1.0;
                } else if sj == si {
                    wins += 0.5;
                }
            }
        }
    }
    wins / pairs
}

/// Average precision from an explicit sweep over every distinct threshold,
/// flagging `id_score ≤ t` as OOD.
fn threshold_sweep_ap(scores: &[f64], is_ood: &[bool]) -> f64 {
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    let n_pos = is_ood.iter().filter(|&&o| o).count() as f64;
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    for t in thresholds {
        let tp = scores
            .iter()
            .zip(is_ood)
            .filter(|(&s, &o)| s <= t && o)
            .count() as f64;
        let flagged = scores.iter().filter(|&&s| s <= t).count() as f64;
        let recall = tp / n_pos;
        ap += (recall - prev_recall) * (tp / flagged);
        prev_recall = recall;
    }
    ap
}

fn criterion_metric_oracles() -> Verdict {
    let mut worst_auc: f64 = 0.0;
    let mut worst_ap: f64 = 0.0;
    let mut tied_sets = 0;
    for case in 0..1000u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(case);
        let n = rng.random_range(2..=200);
        let mut is_ood: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
        is_ood[0] = false;
        is_ood[n - 1] = true;
        let scores: Vec<f64> = match case % 4 {
            0 => (0..n).map(|_| rng.random_range(-3.0..3.0)).collect(),
            1 => (0..n).map(|_| rng.random_range(0..4) as f64).collect(),
            2 => (0..n)
                .map(|_| rng.random_range(0..2) as f64 * 0.5)
                .collect(),
            _ => (0..n)
                .map(|_| {
                    if rng.random_bool(0.9) {
                        0.7
                    } else {
                        rng.random_range(0.0..1.0)
                    }
                })
                .collect(),
        };
        if case % 4 != 0 {
            tied_sets += 1;
        }
        let rows = rows_from(&scores, &is_ood);
        worst_auc =
            worst_auc.max((auroc(&rows).unwrap() - pair_count_auroc(&scores, &is_ood)).abs());
        worst_ap =
            worst_ap.max((aucpr(&rows).unwrap() - threshold_sweep_ap(&scores, &is_ood)).abs());
    }
    (
        worst_auc <= 1e-12 && worst_ap <= 1e-12,
        format!("1000 sets ({tied_sets} heavily tied), max |ΔAUROC| {worst_auc:.1e}, max |ΔAP| {worst_ap:.1e}, tol 1e-12"),
    )
}

// ---------------------------------------------------------------- mahalanobis

fn criterion_mahalanobis_oracle() -> Verdict {
    let mut worst: f64 = 0.0;
    let mut zero_ok = true;
    for case in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(77 + case);
        let z = rng.random_range(1..=20);
        let classes = rng.random_range(2..=5);
        let per_class = 3 * z + 10;
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for c in 0..classes {
            let center: Vec<f64> = (0..z).map(|_| rng.random_range(-4.0..4.0)).collect();
            for _ in 0..per_class {
                rows.push(
                    center
                        .iter()
                        .map(|m| m + rng.random_range(-1.0..1.0) * (1.0 + c as f64 * 0.3))
                        .collect::<Vec<f64>>(),
                );
                labels.push(c);
            }
        }
        let feats = Tensor::from_rows(&rows).unwrap();
        let stats = GaussianStats::from_features(&feats, &labels, classes).unwrap();

        // identity feature map: no hidden layers, so z is the input itself
        let cfg = MlpConfig {
            input_dim: z,
            hidden_dims: vec![],
            num_classes: classes,
            seed: case,
            ..Default::default()
        };
        let clf = Classifier::new(cfg).unwrap();

        let mut means = vec![vec![0.0; z]; classes];
        let mut counts = vec![0.0; classes];
        for (r, &l) in rows.iter().zip(&labels) {
            counts[l] += 1.0;
            for (m, v) in means[l].iter_mut().zip(r) {
                *m += v;
            }
        }
        for (m, n) in means.iter_mut().zip(&counts) {
            m.iter_mut().for_each(|v| *v /= n);
        }
        let mut cov = DMatrix::<f64>::zeros(z, z);
        for (r, &l) in rows.iter().zip(&labels) {
            let d =
                nalgebra::DVector::from_iterator(z, r.iter().zip(&means[l]).map(|(a, b)| a - b));
            cov += &d * d.transpose();
        }
        cov /= rows.len() as f64;
        cov += DMatrix::identity(z, z) * stats.ridge;
        let inv = cov.try_inverse().unwrap();

        let queries: Vec<Vec<f64>> = (0..10)
            .map(|_| (0..z).map(|_| rng.random_range(-6.0..6.0)).collect())
            .collect();
        let got = mahalanobis_score(&stats, &clf, &Tensor::from_rows(&queries).unwrap()).unwrap();
        for (q, s) in queries.iter().zip(&got.scores) {
            let best = means
                .iter()
                .map(|m| {
                    let d =
                        nalgebra::DVector::from_iterator(z, q.iter().zip(m).map(|(a, b)| a - b));
                    (d.transpose() * &inv * &d)[(0, 0)]
                })
                .fold(f64::INFINITY, f64::min);
            worst = worst.max((s.id_score + best).abs() / best.max(1.0));
        }

        let at_mean = mahalanobis_score(
            &stats,
            &clf,
            &Tensor::from_rows(&stats.class_means[..1]).unwrap(),
        )
        .unwrap();
        let s = at_mean.scores[0].id_score;
        zero_ok &= s == 0.0 && s.is_sign_positive();
    }
    (
        worst <= 1e-8 && zero_ok,
        format!("100 cases, max rel err {worst:.1e} (tol 1e-8), exact 0 at class mean: {zero_ok}"),
    )
}

// ------------------------------------------------------------------ reductions

fn criterion_reductions() -> Verdict {
    let toml = r#"
seeds = [0, 1]

[benchmark]
generator = "gaussian"
dim = 4
num_classes = 3
n_per_class = 200
ood_shift = 3.0
seed = 11

[model]
hidden_dims = [16, 16]
dropout_p = 0.0
epochs = 10

[[methods]]
name = "mcp"

[[methods]]
name = "odin"
epsilon = 0.0
tau = 1.0

[[methods]]
name = "mcdp"
n_passes = 8

[[methods]]
name = "ensemble"
members = 1
"#;
    let config = ExperimentConfig::from_toml(toml).unwrap();
    let runner = Runner::new(&config, Path::new(".")).unwrap();
    let methods = config.resolved_methods().unwrap();
    let report = runner.run().unwrap();
    let mut worst: f64 = 0.0;
    let mut same_classes = true;
    let mut same_reports = true;
    for &seed in &config.seeds {
        let models = runner.train_seed(&methods, seed);
        let base = runner.score(&models, &Method::Mcp).unwrap().rows;
        let base_report = report.cell(seed, "mcp").unwrap().report.clone().unwrap();
        for m in methods.iter().filter(|m| **m != Method::Mcp) {
            let rows = runner.score(&models, m).unwrap().rows;
            for (a, b) in rows.iter().zip(&base) {
                worst = worst.max((a.id_score - b.id_score).abs());
                same_classes &= a.predicted_class == b.predicted_class && a.is_ood == b.is_ood;
            }
            let r = report
                .cell(seed, &m.label())
                .unwrap()
                .report
                .clone()
                .unwrap();
            same_reports &= r.auroc == base_report.auroc
                && r.aucpr == base_report.aucpr
                && r.id_accuracy == base_report.id_accuracy
                && (r.ece.unwrap() - base_report.ece.unwrap()).abs() <= 1e-12;
        }
    }
    (
        worst <= 1e-12 && same_classes && same_reports,
        format!(
            "odin(0,1), mcdp(p=0), 1-member ensemble vs mcp: max |Δscore| {worst:.1e}, predictions equal: {same_classes}, reports equal: {same_reports}"
        ),
    )
}

// ------------------------------------------------------- binary temperature

fn binary_sweep(config: &ExperimentConfig, name: &str) -> (bool, String) {
    let runner = Runner::new(config, &configs_dir()).unwrap();
    assert_eq!(runner.bench.train.num_classes(), 2);
    let sweep = runner
        .sweep_temperature(&[1.0, 5.0, 1000.0], config.sweep.epsilon)
        .unwrap();
    let max_gap = sweep
        .binary_checks
        .iter()
        .map(|c| c.auroc_gap)
        .fold(0.0, f64::max);
    let mut min_ece_spread = f64::INFINITY;
    for &seed in &config.seeds {
        for variant in [TempVariant::Baseline, TempVariant::Odin] {
            let eces: Vec<f64> = sweep.curve(seed, variant).iter().map(|p| p.ece).collect();
            let hi = eces.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lo = eces.iter().copied().fold(f64::INFINITY, f64::min);
            min_ece_spread = min_ece_spread.min(hi - lo);
        }
    }
    let ok = sweep.binary_checks.len() == 2 * config.seeds.len()
        && max_gap <= 1e-12
        && min_ece_spread > 1e-3;
    (
        ok,
        format!("{name}: max AUROC gap {max_gap:.1e}, min ECE spread {min_ece_spread:.3}"),
    )
}

fn criterion_binary_temperature() -> Verdict {
    let overlapping = ExperimentConfig::load(&configs_dir().join("overlapping.toml")).unwrap();
    let moons = ExperimentConfig::from_toml(
        r#"
seeds = [0, 1, 2]
methods = [{ name = "mcp" }]

[benchmark]
generator = "moons"
seed = 3
"#,
    )
    .unwrap();
    let (a, da) = binary_sweep(&overlapping, "overlapping");
    let (b, db) = binary_sweep(&moons, "moons");
    (a && b, format!("tau in {{1,5,1000}}; {da}; {db}"))
}

// -------------------------------------------------------- benchmark orderings

fn family_aggregate<'r>(report: &'r RunReport, family: &str) -> &'r oodbench::harness::Aggregate {
    report
        .aggregate
        .iter()
        .find(|a| a.method.split('[').next() == Some(family))
        .unwrap_or_else(|| panic!("no {family} method in report"))
}

fn run_config(name: &str) -> (RunReport, f64) {
    let config = ExperimentConfig::load(&configs_dir().join(name)).unwrap();
    let start = Instant::now();
    let report = Runner::new(&config, &configs_dir()).unwrap().run().unwrap();
    (report, start.elapsed().as_secs_f64())
}

fn criterion_far() -> Verdict {
    let (report, secs) = run_config("far.toml");
    let mcp = family_aggregate(&report, "mcp").auroc.unwrap();
    let maha = family_aggregate(&report, "mahalanobis").auroc.unwrap();
    let mut lowest = ("", f64::INFINITY);
    let mut lowest_acc = ("", f64::INFINITY);
    for a in &report.aggregate {
        let auc = a.auroc.unwrap_or(f64::NEG_INFINITY);
        if auc < lowest.1 {
            lowest = (&a.method, auc);
        }
        let acc = a.id_accuracy.unwrap_or(f64::NEG_INFINITY);
        if acc < lowest_acc.1 {
            lowest_acc = (&a.method, acc);
        }
    }
    let ok = !report.any_failed()
        && maha >= 0.95
        && lowest.1 >= mcp - 0.02
        && lowest_acc.1 >= 0.95
        && secs < 120.0;
    (
        ok,
        format!(
            "mahalanobis {maha:.4}, mcp {mcp:.4}, lowest AUROC {:.4} ({}), lowest ID acc {:.4} ({}), {secs:.1}s",
            lowest.1, lowest.0, lowest_acc.1, lowest_acc.0
        ),
    )
}

fn criterion_overlapping() -> Verdict {
    let (report, secs) = run_config("overlapping.toml");
    let mcp = family_aggregate(&report, "mcp").auroc.unwrap();
    let pert = family_aggregate(&report, "odin_pert_only").auroc.unwrap();
    let odin = family_aggregate(&report, "odin").auroc.unwrap();
    let per_seed: Vec<String> = report
        .cells
        .iter()
        .filter(|c| c.method.starts_with("odin_pert_only"))
        .map(|c| {
            let base = report
                .cell(c.seed, "mcp")
                .and_then(|m| m.report.as_ref())
                .map(|r| r.auroc);
            let diff = c
                .report
                .as_ref()
                .map(|r| r.auroc)
                .zip(base)
                .map(|(p, m)| p - m);
            format!("{:+.4}", diff.unwrap_or(f64::NAN))
        })
        .collect();
    let ok = !report.any_failed() && pert >= mcp && (odin - pert).abs() <= 0.01 && secs < 120.0;
    (
        ok,
        format!(
            "pert-only {pert:.4} vs mcp {mcp:.4} (diff {:+.4}, per seed [{}]), |odin - pert-only| {:.4} (tol 0.01), {secs:.1}s",
            pert - mcp,
            per_seed.join(", "),
            (odin - pert).abs()
        ),
    )
}

// ------------------------------------------------------------------------ ECE

fn criterion_ece() -> Verdict {
    let fixtures: Vec<(Vec<f64>, Vec<bool>, f64)> = vec![
        // 8 at 0.75 with 5 right: |0.625 - 0.75|
        (
            vec![0.75; 8],
            [true, true, true, true, true, false, false, false].to_vec(),
            0.125,
        ),
        // perfect at confidence 1 (top bin is closed)
        (vec![1.0; 4], vec![true; 4], 0.0),
        (vec![0.5; 6], vec![false; 6], 0.5),
        // two bins, half the mass each: 0.5·0 + 0.5·|0.5 - 0.875|
        (
            [vec![0.25; 8], vec![0.875; 8]].concat(),
            [
                vec![true, true],
                vec![false; 6],
                vec![true; 4],
                vec![false; 4],
            ]
            .concat(),
            0.1875,
        ),
    ];
    let mut exact = true;
    for (conf, correct, want) in &fixtures {
        let (got, _) = ece(conf, correct, 15).unwrap();
        exact &= got == *want;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let n = 100_000;
    let conf: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..=1.0)).collect();
    let correct: Vec<bool> = conf.iter().map(|&c| rng.random_bool(c)).collect();
    let (sim, _) = ece(&conf, &correct, 15).unwrap();
    (
        exact && sim <= 0.01,
        format!("{} closed-form fixtures exact: {exact}; calibrated simulator (N=1e5) ECE {sim:.4} (tol 0.01)", fixtures.len()),
    )
}

// ------------------------------------------------------------------------ DUQ

fn criterion_duq() -> Verdict {
    // kernel at the centroid
    let duq = DuqConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut head = DuqHead::new(3, 2, &duq, &mut rng).unwrap();
    let f = rand_tensor(&mut rng, &[1, 3], -1.0, 1.0);
    head.centroids[1] = f.matmul(&head.weights[1]).unwrap().into_data();
    let k = oodbench::nn::duq_forward(&head, &f).unwrap();
    let kernel_one = k.get(0, 1) == 1.0;

    // finite-difference input gradient at ε=1e-4 against the closed form on x ↦ x·W_c
    let mut worst: f64 = 0.0;
    for case in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + case);
        let d = rng.random_range(1..5);
        let e = rng.random_range(1..5);
        let c = rng.random_range(2..4);
        let sigma = rng.random_range(0.5..1.5);
        let weights: Vec<Tensor> = (0..c)
            .map(|_| rand_tensor(&mut rng, &[d, e], -1.0, 1.0))
            .collect();
        let centroids: Vec<Vec<f64>> = (0..c)
            .map(|_| (0..e).map(|_| rng.random_range(-0.5..0.5)).collect())
            .collect();
        let head = DuqHead {
            weights: weights.clone(),
            centroids: centroids.clone(),
            length_scale: sigma,
            centroid_momentum: duq.centroid_momentum,
            penalty_weight: duq.penalty_weight,
            fd_epsilon: 1e-4,
        };
        let cfg = MlpConfig {
            input_dim: d,
            hidden_dims: vec![],
            num_classes: c,
            ..Default::default()
        };
        let model = DuqModel::from_parts(cfg, vec![], head).unwrap();
        let x = rand_tensor(&mut rng, &[4, d], -1.0, 1.0);
        let fd = model.input_gradient(&x).unwrap();
        for (r, xr) in x.row_iter().enumerate() {
            let mut analytic = vec![0.0; d];
            for (w, mu) in weights.iter().zip(&centroids) {
                let diff: Vec<f64> = (0..e)
                    .map(|k| (0..d).map(|j| xr[j] * w.get(j, k)).sum::<f64>() - mu[k])
                    .collect();
                let kc = (-diff.iter().map(|v| v * v).sum::<f64>() / (2.0 * sigma * sigma)).exp();
                for (j, a) in analytic.iter_mut().enumerate() {
                    *a -= kc / (sigma * sigma) * (0..e).map(|k| w.get(j, k) * diff[k]).sum::<f64>();
                }
            }
            worst = worst.max(rel_err(fd.row(r), &analytic));
        }
    }

    // two-class blobs
    let bench = gen_gaussian_benchmark(&GaussianSpec {
        seed: 5,
        ..GaussianSpec::default()
    })
    .unwrap();
    let accs: Vec<f64> = (0..3u64)
        .map(|seed| {
            let cfg = MlpConfig {
                input_dim: 2,
                num_classes: 2,
                seed,
                ..Default::default()
            };
            let mut m = DuqModel::new(cfg, &duq).unwrap();
            match m.train(&bench.train) {
                Ok(_) => m.accuracy(&bench.test_id).unwrap(),
                Err(_) => 0.0,
            }
        })
        .collect();
    let good = accs.iter().filter(|&&a| a >= 0.95).count();
    (
        kernel_one && worst <= 1e-6 && good >= 2,
        format!(
            "kernel at centroid = 1: {kernel_one}; FD gradient max rel err {worst:.1e} (tol 1e-6); blob accuracy {accs:.3?} ({good}/3 ≥ 0.95)"
        ),
    )
}

// ---------------------------------------------------------------- determinism

const DETERMINISM_CONFIG: &str = r#"
seeds = [0, 1]

[benchmark]
generator = "gaussian"
dim = 4
num_classes = 3
n_per_class = 150
n_test_per_class = 80
n_ood = 120
ood_shift = 4.0
seed = 21

[model]
hidden_dims = [16, 16]
epochs = 8

[[methods]]
name = "mcp"

[[methods]]
name = "mcdp"
n_passes = 8

[[methods]]
name = "ensemble"
members = 3

[[methods]]
name = "mahalanobis"

[[methods]]
name = "mahalanobis_ensemble"
members = 3

[[methods]]
name = "odin"
epsilon = [0.0, 0.01]
tau = [1.0, 1000.0]

[[methods]]
name = "odin_pert_only"
epsilon = 0.01

[[methods]]
name = "odin_temp_only"
tau = 1000.0

[[methods]]
name = "duq"
"#;

fn bench_once(config: &Path, out: &Path) -> (String, String, String) {
    let status = Command::new(env!("CARGO_BIN_EXE_oodbench"))
        .args(["bench", "--format", "json", "--config"])
        .arg(config)
        .arg("--out")
        .arg(out)
        .output()
        .unwrap();
    assert!(
        status.status.success(),
        "bench failed: {}",
        String::from_utf8_lossy(&status.stderr)
    );
    let read = |name: &str| std::fs::read_to_string(out.join(name)).unwrap();
    let mut json: serde_json::Value = serde_json::from_str(&read("report.json")).unwrap();
    json["provenance"]["wall_clock_seconds"] = serde_json::Value::from(0.0);
    (
        serde_json::to_string_pretty(&json).unwrap(),
        read("report.md"),
        read("report.csv"),
    )
}

fn criterion_determinism() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bench.toml");
    std::fs::write(&config, DETERMINISM_CONFIG).unwrap();
    let first = bench_once(&config, &dir.path().join("a"));
    let second = bench_once(&config, &dir.path().join("b"));
    let same = [
        first.0 == second.0,
        first.1 == second.1,
        first.2 == second.2,
    ];
    (
        same.iter().all(|&s| s),
        format!("report.json (wall clock zeroed) / report.md / report.csv identical: {same:?}"),
    )
}

// ---------------------------------------------------------------------- main

fn main() {
    let criteria: [Criterion; 10] = [
        ("autodiff gradcheck", criterion_gradcheck),
        ("metric oracles", criterion_metric_oracles),
        (
            "mahalanobis explicit-inverse oracle",
            criterion_mahalanobis_oracle,
        ),
        ("reductions through the harness", criterion_reductions),
        (
            "binary temperature invariance",
            criterion_binary_temperature,
        ),
        ("far benchmark ordering", criterion_far),
        ("overlapping benchmark ordering", criterion_overlapping),
        ("ECE closed forms and calibrated simulator", criterion_ece),
        ("DUQ sanity", criterion_duq),
        ("bench determinism", criterion_determinism),
    ];
    let limits = [
        ("autodiff gradcheck", 10.0),
        ("metric oracles", 30.0),
        ("far benchmark ordering", 120.0),
        ("overlapping benchmark ordering", 120.0),
    ];
    let mut failed = 0;
    for (name, f) in criteria {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f));
        let secs = start.elapsed().as_secs_f64();
        let (mut ok, mut detail) = outcome.unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            (false, format!("panicked: {msg}"))
        });
        if let Some((_, limit)) = limits.iter().find(|(n, _)| *n == name) {
            if secs >= *limit {
                ok = false;
                detail.push_str(&format!("; over the {limit}s limit"));
            }
        }
        if !ok {
            failed += 1;
        }
        println!(
            "{} {name}: {detail} [{secs:.1}s]",
            if ok { "PASS" } else { "FAIL" }
        );
    }
    println!("acceptance: {} passed, {failed} failed", 10 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
