//! Tabular dataset loading, schema fitting on training rows, encoding, and
//! seeded 50/50 splits.
//!
//! CSV parse rules: the first line is a header, fields are comma separated
//! and may be double-quoted. A cell is missing when, after trimming, it is
//! empty, `?`, `NaN` or `nan`. In numerical columns any cell that does not
//! parse as a float is also missing.

use std::collections::{BTreeSet, HashMap};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::RowBlock;
use crate::schema::{is_missing, Column, FeatureKind, FeatureSchema};
use crate::tokenize::NAN_ROW;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Cell {
    Number(f64),
    Text(String),
    Missing,
}

/// A typed table with one target column split off.
#[derive(Clone, Debug, PartialEq)]
pub struct RawDataset {
    /// Feature columns (target excluded) with their declared kind.
    pub columns: Vec<(String, FeatureKind)>,
    /// `rows[r][c]` is the cell of feature column `c`.
    pub rows: Vec<Vec<Cell>>,
    /// Target values as class indices into `classes`.
    pub targets: Vec<usize>,
    /// Sorted distinct target strings.
    pub classes: Vec<String>,
}

impl RawDataset {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> RawDataset {
        RawDataset {
            columns: self.columns.clone(),
            rows: indices.iter().map(|&i| self.rows[i].clone()).collect(),
            targets: indices.iter().map(|&i| self.targets[i]).collect(),
            classes: self.classes.clone(),
        }
    }
}

/// Dataset descriptor file (TOML):
///
/// ```toml
/// name = "cmc"
/// csv = "cmc.csv"            # relative to the descriptor
/// target = "class"
/// categorical = ["education", "occupation"]
/// ```
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetDescriptor {
    #[serde(default)]
    pub name: String,
    pub csv: PathBuf,
    pub target: String,
    #[serde(default)]
    pub categorical: Vec<String>,
}

impl DatasetDescriptor {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut d: DatasetDescriptor =
            toml::from_str(&text).map_err(|e| Error::Parse { line: None, msg: format!("{}: {e}", path.display()) })?;
        if d.csv.is_relative() {
            if let Some(dir) = path.parent() {
                d.csv = dir.join(&d.csv);
            }
        }
        if d.name.is_empty() {
            d.name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        }
        Ok(d)
    }

    pub fn load(&self) -> Result<RawDataset> {
        let cats: Vec<&str> = self.categorical.iter().map(String::as_str).collect();
        load_csv(&self.csv, &self.target, &cats)
    }
}

pub fn load_csv(path: &Path, target: &str, categorical: &[&str]) -> Result<RawDataset> {
    let file = std::fs::File::open(path)?;
    read_csv(file, target, categorical)
}

pub fn read_csv<R: std::io::Read>(reader: R, target: &str, categorical: &[&str]) -> Result<RawDataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let header: Vec<String> = rdr.headers().map_err(csv_error)?.iter().map(str::to_owned).collect();
    if header.is_empty() || header.iter().all(String::is_empty) {
        return Err(Error::Parse { line: Some(1), msg: "empty file or missing header".into() });
    }
    let target_idx = header
        .iter()
        .position(|h| h == target)
        .ok_or_else(|| Error::Schema(format!("target column `{target}` not in header")))?;
    if let Some(c) = categorical.iter().find(|c| !header.iter().any(|h| h == *c)) {
        return Err(Error::Schema(format!("categorical column `{c}` not in header")));
    }
    if categorical.contains(&target) {
        return Err(Error::Schema(format!("target `{target}` also listed as categorical")));
    }
    let columns: Vec<(String, FeatureKind)> = header
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != target_idx)
        .map(|(_, h)| {
            let kind = if categorical.contains(&h.as_str()) { FeatureKind::Categorical } else { FeatureKind::Numerical };
            (h.clone(), kind)
        })
        .collect();

    let mut rows = Vec::new();
    let mut raw_targets = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(csv_error)?;
        let line = record.position().map(|p| p.line());
        let mut cells = Vec::with_capacity(columns.len());
        let mut col = 0;
        for (i, field) in record.iter().enumerate() {
            if i == target_idx {
                if is_missing(field) {
                    return Err(Error::Parse { line, msg: format!("missing target `{target}`") });
                }
                raw_targets.push(field.to_owned());
                continue;
            }
            let cell = if is_missing(field) {
                Cell::Missing
            } else {
                match columns[col].1 {
                    FeatureKind::Categorical => Cell::Text(field.to_owned()),
                    FeatureKind::Numerical => field
                        .parse::<f64>()
                        .ok()
                        .filter(|v| v.is_finite())
                        .map_or(Cell::Missing, Cell::Number),
                }
            };
            cells.push(cell);
            col += 1;
        }
        rows.push(cells);
    }
    if rows.is_empty() {
        return Err(Error::Parse { line: Some(2), msg: "no data rows".into() });
    }
    let classes: Vec<String> = raw_targets.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect();
    if classes.len() < 2 {
        return Err(Error::Schema(format!("target `{target}` has fewer than two classes")));
    }
    let targets = raw_targets.iter().map(|t| classes.binary_search(t).expect("class present")).collect();
    Ok(RawDataset { columns, rows, targets, classes })
}

fn csv_error(e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line());
    match e.kind() {
        csv::ErrorKind::Io(_) => Error::Parse { line, msg: e.to_string() },
        csv::ErrorKind::UnequalLengths { expected_len, len, .. } => Error::Parse {
            line,
            msg: format!("ragged row: expected {expected_len} fields, found {len}"),
        },
        _ => Error::Parse { line, msg: e.to_string() },
    }
}

/// Training-set mean and standard deviation per numerical column.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
}

/// Vocabularies and numerical statistics from `train` only. Constant
/// numerical columns get std 1.
pub fn fit_schema(train: &RawDataset) -> Result<(FeatureSchema, NormStats)> {
    if train.is_empty() {
        return Err(Error::Precondition("cannot fit a schema on zero rows".into()));
    }
    let mut columns = Vec::with_capacity(train.columns.len());
    let mut means = Vec::new();
    let mut stds = Vec::new();
    for (c, (name, kind)) in train.columns.iter().enumerate() {
        match kind {
            FeatureKind::Categorical => {
                let mut vocab: Vec<String> = Vec::new();
                for row in &train.rows {
                    if let Cell::Text(v) = &row[c] {
                        if !vocab.contains(v) {
                            vocab.push(v.clone());
                        }
                    }
                }
                columns.push(Column::categorical(name.clone(), vocab));
            }
            FeatureKind::Numerical => {
                let vals: Vec<f64> = train
                    .rows
                    .iter()
                    .filter_map(|r| match r[c] {
                        Cell::Number(v) => Some(v),
                        _ => None,
                    })
                    .collect();
                let (mean, std) = if vals.is_empty() {
                    (0.0, 1.0)
                } else {
                    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
                    let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
                    let std = var.sqrt();
                    (mean, if std > 1e-12 { std } else { 1.0 })
                };
                means.push(mean);
                stds.push(std);
                columns.push(Column::numerical(name.clone()));
            }
        }
    }
    Ok((FeatureSchema::new(columns)?, NormStats { means, stds }))
}

/// Rows encoded against a fitted schema.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedDataset {
    pub schema: FeatureSchema,
    pub x: RowBlock,
    pub labels: Vec<usize>,
    pub n_classes: usize,
}

impl EncodedDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn select(&self, indices: &[usize]) -> EncodedDataset {
        EncodedDataset {
            schema: self.schema.clone(),
            x: self.x.select(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            n_classes: self.n_classes,
        }
    }
}

/// Z-normalizes numerical cells (missing → training mean → 0.0) and maps
/// categorical cells through the schema's index function (missing or
/// unseen → row 0).
pub fn encode(data: &RawDataset, schema: &FeatureSchema, stats: &NormStats) -> Result<EncodedDataset> {
    if data.columns.len() != schema.columns().len()
        || data.columns.iter().zip(schema.columns()).any(|((n, k), c)| *n != c.name || *k != c.kind)
    {
        return Err(Error::Schema("dataset columns do not match the fitted schema".into()));
    }
    let offsets = schema.offsets();
    let lookups: Vec<HashMap<&str, usize>> = schema
        .categorical()
        .zip(&offsets)
        .map(|(c, &o)| c.vocabulary.iter().enumerate().map(|(p, v)| (v.as_str(), o + p)).collect())
        .collect();
    let (n, m) = (schema.n(), schema.m());
    let mut numeric = Vec::with_capacity(data.len() * n);
    let mut categorical = Vec::with_capacity(data.len() * m);
    for row in &data.rows {
        let (mut i, mut j) = (0, 0);
        for (cell, col) in row.iter().zip(schema.columns()) {
            match col.kind {
                FeatureKind::Numerical => {
                    let v = match cell {
                        Cell::Number(v) => *v,
                        _ => stats.means[i],
                    };
                    numeric.push((v - stats.means[i]) / stats.stds[i]);
                    i += 1;
                }
                FeatureKind::Categorical => {
                    let idx = match cell {
                        Cell::Text(v) => lookups[j].get(v.as_str()).copied().unwrap_or(NAN_ROW),
                        _ => NAN_ROW,
                    };
                    categorical.push(idx);
                    j += 1;
                }
            }
        }
    }
    Ok(EncodedDataset {
        schema: schema.clone(),
        x: RowBlock { rows: data.len(), n, m, numeric, categorical },
        labels: data.targets.clone(),
        n_classes: data.classes.len(),
    })
}

/// Seeded uniform shuffle, then the first `ceil(len/2)` rows train.
pub fn split_indices(len: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..len).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let test = idx.split_off(len.div_ceil(2));
    (idx, test)
}

pub fn split_train_test(data: &RawDataset, seed: u64) -> Result<(RawDataset, RawDataset)> {
    if data.len() < 2 {
        return Err(Error::Precondition("splitting needs at least two rows".into()));
    }
    let (train, test) = split_indices(data.len(), seed);
    Ok((data.subset(&train), data.subset(&test)))
}
