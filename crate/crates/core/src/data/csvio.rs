use std::collections::HashMap;
use std::path::Path;

use super::LabeledSet;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Expected columns of a tabular file.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvSchema {
    pub feature_columns: Vec<String>,
    pub label_column: Option<String>,
    /// When set, a missing label column is an error rather than an
    /// unlabeled read.
    pub require_label: bool,
    /// Class count; inferred as `max label + 1` when absent.
    pub num_classes: Option<usize>,
}

impl CsvSchema {
    /// Schema with features `x0..x{dim-1}` and an optional `label` column.
    pub fn default_names(dim: usize, labeled: bool) -> Self {
        CsvSchema {
            feature_columns: feature_names(dim),
            label_column: labeled.then(|| "label".to_string()),
            require_label: labeled,
            num_classes: None,
        }
    }
}

pub(crate) fn feature_names(dim: usize) -> Vec<String> {
    (0..dim).map(|j| format!("x{j}")).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub enum Ingested {
    Labeled(LabeledSet),
    Unlabeled(Tensor),
}

fn parse_err(row: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        row,
        message: message.into(),
    }
}

/// Reads a headed CSV file. Row numbers in errors count the header as row 1.
pub fn ingest_csv(path: &Path, schema: &CsvSchema) -> Result<Ingested> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(file);
    let header = reader.headers()?.clone();

    let mut index: HashMap<&str, usize> = HashMap::new();
    for (i, name) in header.iter().enumerate() {
        let known = schema.feature_columns.iter().any(|c| c == name)
            || schema.label_column.as_deref() == Some(name);
        if !known {
            return Err(parse_err(1, format!("unknown column `{name}`")));
        }
        if index.insert(name, i).is_some() {
            return Err(parse_err(1, format!("duplicate column `{name}`")));
        }
    }
    let mut feature_idx = Vec::with_capacity(schema.feature_columns.len());
    for c in &schema.feature_columns {
        match index.get(c.as_str()) {
            Some(&i) => feature_idx.push(i),
            None => return Err(parse_err(1, format!("missing feature column `{c}`"))),
        }
    }
    let label_idx = match &schema.label_column {
        Some(c) => match index.get(c.as_str()) {
            Some(&i) => Some(i),
            None if schema.require_label => {
                return Err(parse_err(1, format!("missing label column `{c}`")))
            }
            None => None,
        },
        None => None,
    };

    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (k, record) in reader.records().enumerate() {
        let row = k + 2;
        let record = record.map_err(|e| parse_err(row, e.to_string()))?;
        if record.len() != header.len() {
            return Err(parse_err(
                row,
                format!("expected {} cells, found {}", header.len(), record.len()),
            ));
        }
        for &i in &feature_idx {
            let cell = record[i].trim();
            let v: f64 = cell.parse().map_err(|_| {
                parse_err(
                    row,
                    format!("non-numeric cell `{cell}` in `{}`", &header[i]),
                )
            })?;
            if !v.is_finite() {
                return Err(parse_err(
                    row,
                    format!("non-finite value in `{}`", &header[i]),
                ));
            }
            data.push(v);
        }
        if let Some(i) = label_idx {
            let cell = record[i].trim();
            let l: usize = cell
                .parse()
                .map_err(|_| parse_err(row, format!("label `{cell}` is not a class index")))?;
            labels.push(l);
        }
    }
    let n = data.len() / feature_idx.len().max(1);
    if n == 0 {
        return Err(parse_err(2, "no data rows"));
    }
    let features = Tensor::matrix(n, feature_idx.len(), data)?;
    match label_idx {
        Some(_) => {
            let inferred = labels.iter().max().map_or(0, |m| m + 1);
            let num_classes = schema.num_classes.unwrap_or(inferred.max(2));
            Ok(Ingested::Labeled(LabeledSet::new(
                features,
                labels,
                num_classes,
            )?))
        }
        None => Ok(Ingested::Unlabeled(features)),
    }
}

/// Seventeen significant digits, enough for an exact `f64` round trip.
pub(crate) fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn create(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(file))
}

pub fn write_labeled_csv(path: &Path, set: &LabeledSet) -> Result<()> {
    let mut w = create(path)?;
    let mut header = feature_names(set.dim());
    header.push("label".into());
    w.write_record(&header)?;
    for (row, label) in set.features().row_iter().zip(set.labels()) {
        let mut rec: Vec<String> = row.iter().map(|&v| fmt_f64(v)).collect();
        rec.push(label.to_string());
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_matrix_csv(path: &Path, features: &Tensor) -> Result<()> {
    let mut w = create(path)?;
    w.write_record(feature_names(features.cols()))?;
    for row in features.row_iter() {
        w.write_record(row.iter().map(|&v| fmt_f64(v)))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
