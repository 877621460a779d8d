use std::path::PathBuf;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use tabtoken_core::checkpoint;
use tabtoken_core::tokenize::{category_gram_matrix, identifier_gram_matrix, write_matrix_csv};

use crate::config::write_resolved;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeatmapRun {
    pub out: PathBuf,
    pub checkpoint: PathBuf,
}

impl Default for HeatmapRun {
    fn default() -> Self {
        HeatmapRun { out: PathBuf::from("runs/heatmaps"), checkpoint: PathBuf::from("runs/finetune/model_full_seed0.json") }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeatmapFiles {
    pub category: PathBuf,
    /// `None` when the checkpoint has no identifiers.
    pub identifier: Option<PathBuf>,
}

/// Writes `category_gram.csv` (inner products of all token-table rows) and,
/// when identifiers exist, `identifier_gram.csv` (their cosine matrix).
pub fn run(run: &HeatmapRun) -> Result<HeatmapFiles> {
    let model = checkpoint::load(&run.checkpoint).with_context(|| format!("loading {}", run.checkpoint.display()))?;
    write_resolved(&run.out, run)?;
    let category = run.out.join("category_gram.csv");
    let table = model.token_table()?;
    write_matrix_csv(std::fs::File::create(&category)?, &category_gram_matrix(&table.weights))?;
    let identifier = match model.identifiers() {
        Some(ids) => {
            let path = run.out.join("identifier_gram.csv");
            write_matrix_csv(std::fs::File::create(&path)?, &identifier_gram_matrix(&ids))?;
            Some(path)
        }
        None => {
            eprintln!("warning: checkpoint has no feature identifiers; wrote the category matrix only");
            None
        }
    };
    Ok(HeatmapFiles { category, identifier })
}
