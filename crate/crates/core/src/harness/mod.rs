//! Experiment configs, the training/scoring planner, reports and sweeps.

mod config;
mod run;
mod sweep;

use std::path::Path;

pub use config::{
    BenchmarkConfig, CsvBenchmark, ExperimentConfig, Method, MethodSpec, OneOrMany, SweepConfig,
};
pub use run::{
    member_seed, plan_jobs, run, Aggregate, Cell, CellScores, CellStatus, Job, Provenance,
    RunReport, Runner, SeedModels,
};
pub use sweep::{
    pool_name, BinaryCheck, PoolRow, PoolStatus, PoolSweep, TempPoint, TempSweep, TempVariant,
    BINARY_AUROC_TOLERANCE,
};

use crate::data::fmt_f64;
use crate::error::{Error, Result};

/// Comparison-table order of method families and their display names.
const FAMILIES: [(&str, &str); 9] = [
    ("mcp", "MCP"),
    ("mcdp", "MCDP"),
    ("ensemble", "Deep Ensemble"),
    ("mahalanobis", "Mahalanobis"),
    ("mahalanobis_ensemble", "Mahalanobis Ens."),
    ("odin", "ODIN"),
    ("odin_pert_only", "ODIN (pert only)"),
    ("odin_temp_only", "ODIN (temp only)"),
    ("duq", "DUQ"),
];

fn family(label: &str) -> &str {
    label.split('[').next().unwrap_or(label)
}

fn family_rank(label: &str) -> usize {
    let f = family(label);
    FAMILIES
        .iter()
        .position(|(k, _)| *k == f)
        .unwrap_or(FAMILIES.len())
}

/// Human-readable name, e.g. `ODIN [eps=0.01;tau=1000]`.
pub fn display_name(label: &str) -> String {
    let f = family(label);
    let name = FAMILIES
        .iter()
        .find(|(k, _)| *k == f)
        .map(|(_, n)| n.to_string())
        .unwrap_or_else(|| f.to_string());
    match label.find('[') {
        Some(i) => format!("{name} {}", &label[i..]),
        None => name,
    }
}

fn fmt_metric(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.4}")).unwrap_or_else(|| "n/a".into())
}

impl RunReport {
    /// Mean-over-seeds comparison table.
    pub fn to_markdown(&self) -> String {
        let mut rows: Vec<&Aggregate> = self.aggregate.iter().collect();
        rows.sort_by_key(|a| family_rank(&a.method));
        let mut s = String::from(
            "| Method | AUROC | AUCPR | ID Acc | ECE | Seeds |\n|---|---|---|---|---|---|\n",
        );
        for a in rows {
            let seeds = if a.n_failed == 0 {
                a.n_ok.to_string()
            } else {
                format!("{} ({} failed)", a.n_ok, a.n_failed)
            };
            s.push_str(&format!(
                "| {} | {} | {} | {} | {} | {seeds} |\n",
                display_name(&a.method),
                fmt_metric(a.auroc),
                fmt_metric(a.aucpr),
                fmt_metric(a.id_accuracy),
                fmt_metric(a.ece),
            ));
        }
        s
    }

    /// One line per cell: `seed,method,status,auroc,aucpr,id_accuracy,ece,error`.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "seed",
            "method",
            "status",
            "auroc",
            "aucpr",
            "id_accuracy",
            "ece",
            "error",
        ])?;
        for c in &self.cells {
            let r = c.report.as_ref();
            let f = |v: Option<f64>| v.map(fmt_f64).unwrap_or_default();
            w.write_record([
                c.seed.to_string(),
                c.method.clone(),
                format!("{:?}", c.status).to_lowercase(),
                f(r.map(|r| r.auroc)),
                f(r.map(|r| r.aucpr)),
                f(r.map(|r| r.id_accuracy)),
                f(r.and_then(|r| r.ece)),
                c.error.clone().unwrap_or_default(),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Usage(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    /// Writes `report.json`, `report.md` and `report.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, body) in [
            ("report.json", self.to_json()?),
            ("report.md", self.to_markdown()),
            ("report.csv", self.to_csv()?),
        ] {
            let p = dir.join(name);
            std::fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}
