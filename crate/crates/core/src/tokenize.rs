//! Feature tokenization: every feature value becomes a `d`-dimensional
//! token and a sample embeds as the sum of its tokens.
//!
//! * numerical column `i`: `x_i · W_num[i]`, with `W_num` frozen during
//!   fine-tuning;
//! * categorical column `j`: `W_cat[g(x_j)] + I[j]`, where `g` maps a raw
//!   value to its table row and missing or unseen values map to the all-zero
//!   row 0.
//!
//! The identifier rows `I` are pushed towards mutual orthogonality by
//! [`orthogonal_loss`].

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exact_sum::exact_sum;
use crate::graph::{matmul_nt, normalize_rows, Graph};
use crate::schema::{is_missing, FeatureSchema};
use crate::tensor::Tensor;

/// Lower bound on identifier norms before normalization.
pub const NORM_EPS: f64 = 1e-12;

/// Index of the shared missing-value token.
pub const NAN_ROW: usize = 0;

#[derive(Clone, Debug, PartialEq)]
pub struct NumericalWeightMatrix(pub Tensor);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoricalTokenTable {
    pub weights: Tensor,
    pub offsets: Vec<usize>,
}

impl CategoricalTokenTable {
    /// Row 0 zero, every other row `N(0, 1/d)`.
    pub fn init<R: Rng + ?Sized>(schema: &FeatureSchema, d: usize, rng: &mut R) -> Self {
        let mut weights = Tensor::randn(vec![schema.table_rows(), d], 1.0 / (d as f64).sqrt(), rng);
        weights.row_mut(NAN_ROW).fill(0.0);
        CategoricalTokenTable { weights, offsets: schema.offsets() }
    }

    pub fn rows(&self) -> usize {
        self.weights.rows()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureIdentifiers(pub Tensor);

impl FeatureIdentifiers {
    pub fn init<R: Rng + ?Sized>(m: usize, d: usize, rng: &mut R) -> Self {
        FeatureIdentifiers(Tensor::randn(vec![m, d], 1.0 / (d as f64).sqrt(), rng))
    }

    pub fn m(&self) -> usize {
        self.0.rows()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleEmbedding(pub Vec<f64>);

pub fn tokenize_numerical(value: f64, i: usize, w: &NumericalWeightMatrix) -> Result<Vec<f64>> {
    if i >= w.0.rows() {
        return Err(Error::Index(format!("numerical column {i} of {}", w.0.rows())));
    }
    if !value.is_finite() {
        return Err(Error::Numeric(format!("numerical feature {i} is {value}")));
    }
    Ok(w.0.row(i).iter().map(|wk| value * wk).collect())
}

/// The index function `g`: missing and unseen values map to [`NAN_ROW`].
pub fn map_category(value: Option<&str>, j: usize, schema: &FeatureSchema) -> Result<usize> {
    let column = schema.categorical_column(j)?;
    let Some(value) = value.filter(|v| !is_missing(v)) else {
        return Ok(NAN_ROW);
    };
    let offset = schema.offsets()[j];
    Ok(column
        .vocabulary
        .iter()
        .position(|v| v == value)
        .map_or(NAN_ROW, |p| offset + p))
}

pub fn tokenize_categorical(
    value: Option<&str>,
    j: usize,
    table: &CategoricalTokenTable,
    ids: Option<&FeatureIdentifiers>,
    schema: &FeatureSchema,
) -> Result<Vec<f64>> {
    let row = map_category(value, j, schema)?;
    tokenize_categorical_index(row, j, table, ids)
}

/// Categorical token from an already mapped table row.
pub fn tokenize_categorical_index(
    row: usize,
    j: usize,
    table: &CategoricalTokenTable,
    ids: Option<&FeatureIdentifiers>,
) -> Result<Vec<f64>> {
    if row >= table.rows() {
        return Err(Error::Index(format!("table row {row} of {}", table.rows())));
    }
    let base = table.weights.row(row);
    match ids {
        Some(ids) => {
            if j >= ids.m() {
                return Err(Error::Index(format!("identifier {j} of {}", ids.m())));
            }
            if ids.0.cols() != base.len() {
                return Err(Error::dim("tokenize_categorical", "identifier width differs from table width"));
            }
            Ok(base.iter().zip(ids.0.row(j)).map(|(a, b)| a + b).collect())
        }
        None => Ok(base.to_vec()),
    }
}

/// Elementwise sum of all tokens of a sample, correctly rounded so the
/// result does not depend on token order.
pub fn aggregate_tokens(tokens: &[Vec<f64>]) -> Result<SampleEmbedding> {
    let d = tokens
        .first()
        .ok_or_else(|| Error::Precondition("aggregate_tokens needs at least one token".into()))?
        .len();
    if tokens.iter().any(|t| t.len() != d) {
        return Err(Error::dim("aggregate_tokens", "tokens differ in dimension"));
    }
    Ok(SampleEmbedding((0..d).map(|k| exact_sum(tokens.iter().map(|t| t[k]))).collect()))
}

/// `Σ_{i≠j} G_ij²` over the cosine-similarity matrix of identifier rows.
pub fn orthogonal_loss(ids: &FeatureIdentifiers) -> f64 {
    let mut g = Graph::new();
    let v = g.leaf(&ids.0);
    let loss = g.orthogonal_loss(v, NORM_EPS);
    g.scalar(loss)
}

/// Inner products between all rows of the token table.
pub fn category_gram_matrix(table: &Tensor) -> Vec<Vec<f64>> {
    let (r, d) = table.dims2();
    let flat = matmul_nt(&table.data, &table.data, r, d, r);
    flat.chunks(r.max(1)).map(<[f64]>::to_vec).take(r).collect()
}

/// Cosine similarities between identifier rows, normalized exactly as in
/// [`orthogonal_loss`].
pub fn identifier_gram_matrix(ids: &FeatureIdentifiers) -> Vec<Vec<f64>> {
    let (m, d) = ids.0.dims2();
    let (unit, _) = normalize_rows(&ids.0.data, m, d, NORM_EPS);
    let flat = matmul_nt(&unit, &unit, m, d, m);
    flat.chunks(m.max(1)).map(<[f64]>::to_vec).take(m).collect()
}

/// Mean absolute off-diagonal entry; 0 for matrices smaller than 2x2.
pub fn mean_abs_off_diagonal(matrix: &[Vec<f64>]) -> f64 {
    let m = matrix.len();
    if m < 2 {
        return 0.0;
    }
    let total: f64 = (0..m)
        .flat_map(|i| (0..m).filter(move |&j| j != i).map(move |j| (i, j)))
        .map(|(i, j)| matrix[i][j].abs())
        .sum();
    total / (m * (m - 1)) as f64
}

/// Writes a square matrix as CSV: a header row of column indices, then one
/// row per matrix row prefixed by its index. Values use the shortest
/// representation that parses back to the same `f64`.
pub fn write_matrix_csv<W: Write>(mut out: W, matrix: &[Vec<f64>]) -> Result<()> {
    let cols = matrix.first().map_or(0, Vec::len);
    let header: Vec<String> = std::iter::once("index".to_owned()).chain((0..cols).map(|i| i.to_string())).collect();
    writeln!(out, "{}", header.join(","))?;
    for (i, row) in matrix.iter().enumerate() {
        let cells: Vec<String> = std::iter::once(i.to_string()).chain(row.iter().map(|v| v.to_string())).collect();
        writeln!(out, "{}", cells.join(","))?;
    }
    Ok(())
}

/// Parses a matrix written by [`write_matrix_csv`].
pub fn read_matrix_csv(text: &str) -> Result<Vec<Vec<f64>>> {
    text.lines()
        .enumerate()
        .skip(1)
        .filter(|(_, l)| !l.is_empty())
        .map(|(line, l)| {
            l.split(',')
                .skip(1)
                .map(|c| {
                    c.parse::<f64>().map_err(|e| Error::Parse { line: Some(line as u64 + 1), msg: e.to_string() })
                })
                .collect()
        })
        .collect()
}
