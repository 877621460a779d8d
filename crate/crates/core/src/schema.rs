use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Cell spellings treated as missing values.
pub const MISSING_SENTINELS: [&str; 4] = ["", "?", "NaN", "nan"];

pub fn is_missing(cell: &str) -> bool {
    MISSING_SENTINELS.contains(&cell.trim())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    Numerical,
    Categorical,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Column {
    pub name: String,
    pub kind: FeatureKind,
    /// Distinct raw values in first-seen order; empty for numerical columns.
    #[serde(default)]
    pub vocabulary: Vec<String>,
}

impl Column {
    pub fn numerical(name: impl Into<String>) -> Self {
        Column { name: name.into(), kind: FeatureKind::Numerical, vocabulary: Vec::new() }
    }

    pub fn categorical(name: impl Into<String>, vocabulary: Vec<String>) -> Self {
        Column { name: name.into(), kind: FeatureKind::Categorical, vocabulary }
    }
}

/// Ordered column declarations for one dataset.
///
/// Numerical column `i` (in column order, counting only numerical columns)
/// owns row `i` of the numerical weight matrix; categorical column `j` owns
/// the table rows `offsets()[j] .. offsets()[j] + vocabulary.len()`. Row 0 of
/// the table is the shared missing-value token.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureSchema {
    columns: Vec<Column>,
}

impl FeatureSchema {
    pub fn new(columns: Vec<Column>) -> Result<Self> {
        for c in &columns {
            if c.kind == FeatureKind::Numerical && !c.vocabulary.is_empty() {
                return Err(Error::Schema(format!("numerical column `{}` has a vocabulary", c.name)));
            }
            for (i, v) in c.vocabulary.iter().enumerate() {
                if is_missing(v) {
                    return Err(Error::Schema(format!("vocabulary of `{}` contains missing sentinel {v:?}", c.name)));
                }
                if c.vocabulary[..i].contains(v) {
                    return Err(Error::Schema(format!("vocabulary of `{}` repeats {v:?}", c.name)));
                }
            }
        }
        Ok(FeatureSchema { columns })
    }

    pub fn columns(&self) -> &[Column] {
        &self.columns
    }

    pub fn numerical(&self) -> impl Iterator<Item = &Column> {
        self.columns.iter().filter(|c| c.kind == FeatureKind::Numerical)
    }

    pub fn categorical(&self) -> impl Iterator<Item = &Column> {
        self.columns.iter().filter(|c| c.kind == FeatureKind::Categorical)
    }

    /// Number of numerical columns.
    pub fn n(&self) -> usize {
        self.numerical().count()
    }

    /// Number of categorical columns.
    pub fn m(&self) -> usize {
        self.categorical().count()
    }

    /// Total category count `N` over all categorical columns.
    pub fn total_categories(&self) -> usize {
        self.categorical().map(|c| c.vocabulary.len()).sum()
    }

    /// Rows in the token table: `N + 1`.
    pub fn table_rows(&self) -> usize {
        self.total_categories() + 1
    }

    /// First table row of each categorical column.
    pub fn offsets(&self) -> Vec<usize> {
        let mut next = 1;
        self.categorical()
            .map(|c| {
                let o = next;
                next += c.vocabulary.len();
                o
            })
            .collect()
    }

    pub fn categorical_column(&self, j: usize) -> Result<&Column> {
        self.categorical()
            .nth(j)
            .ok_or_else(|| Error::Index(format!("categorical column {j} of {}", self.m())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn offsets_partition_table_rows() {
        let s = FeatureSchema::new(vec![
            Column::categorical("a", vocab(&["x", "y", "z"])),
            Column::numerical("num"),
            Column::categorical("b", vocab(&["p", "q"])),
        ])
        .unwrap();
        assert_eq!(s.offsets(), vec![1, 4]);
        assert_eq!(s.table_rows(), 6);
        assert_eq!((s.n(), s.m()), (1, 2));
    }

    #[test]
    fn rejects_duplicate_or_sentinel_vocabulary() {
        assert!(FeatureSchema::new(vec![Column::categorical("a", vocab(&["x", "x"]))]).is_err());
        assert!(FeatureSchema::new(vec![Column::categorical("a", vocab(&["x", "?"]))]).is_err());
    }
}
