use std::path::PathBuf;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use tabtoken_core::checkpoint;
use tabtoken_core::data::{encode, split_train_test, DatasetDescriptor};
use tabtoken_core::finetune::{test_scores, FinetuneConfig, Variant};
use tabtoken_core::protocol::{run_protocol, summary_table, RepetitionReport, SeedResult, DEFAULT_REPETITIONS};
use tabtoken_core::Error;

use crate::config::write_resolved;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateRun {
    pub out: PathBuf,
    pub checkpoint: PathBuf,
    pub dataset: PathBuf,
    /// Split seed for a fine-tuned checkpoint; first repetition seed for a
    /// backbone.
    pub seed: u64,
    pub repetitions: usize,
    pub max_support_rows: usize,
    pub predict_chunk: usize,
}

impl Default for EvaluateRun {
    fn default() -> Self {
        let f = FinetuneConfig::default();
        EvaluateRun {
            out: PathBuf::from("runs/evaluate"),
            checkpoint: PathBuf::from("runs/pretrain/checkpoint.json"),
            dataset: PathBuf::new(),
            seed: 0,
            repetitions: DEFAULT_REPETITIONS,
            max_support_rows: f.max_support_rows,
            predict_chunk: f.predict_chunk,
        }
    }
}

/// Scores a checkpoint on a dataset without any parameter updates.
///
/// A checkpoint bound to a schema (a fine-tuned model) is evaluated on the
/// test half of the split for `seed`, with the training half as support and
/// the stored schema and normalization. A bare backbone gets a fresh
/// categorical layer per repetition and is evaluated in context only.
/// Writes `eval.jsonl` and `summary.txt`.
pub fn run(run: &EvaluateRun) -> Result<RepetitionReport> {
    if run.dataset.as_os_str().is_empty() {
        return Err(Error::Config { field: "dataset".into(), msg: "a dataset descriptor is required".into() }.into());
    }
    let descriptor = DatasetDescriptor::from_file(&run.dataset)?;
    let data = descriptor.load().with_context(|| format!("loading {}", descriptor.csv.display()))?;
    let model = checkpoint::load(&run.checkpoint).with_context(|| format!("loading {}", run.checkpoint.display()))?;
    write_resolved(&run.out, run)?;
    let cfg = FinetuneConfig {
        epochs: 0,
        max_support_rows: run.max_support_rows,
        predict_chunk: run.predict_chunk,
        seed: run.seed,
        variant: if model.has_identifiers() { Variant::Full } else { Variant::NoIdentifiers },
        ..Default::default()
    };
    let report = match (&model.schema, &model.stats) {
        (Some(schema), Some(stats)) => {
            let (train_raw, test_raw) = split_train_test(&data, run.seed)?;
            let train = encode(&train_raw, schema, stats)?;
            let test = encode(&test_raw, schema, stats)?;
            let s = test_scores(&model, &train, &test, &cfg)?;
            let result = SeedResult {
                seed: run.seed,
                train_rows: train.len(),
                test_rows: test.len(),
                selected_epoch: None,
                train_auc: None,
                test_auc: s.auc,
                test_accuracy: s.accuracy,
            };
            RepetitionReport::new(&descriptor.name, cfg.variant, vec![result])
        }
        _ => run_protocol(&descriptor.name, &data, &model, &cfg, run.repetitions)?.0,
    };
    std::fs::write(run.out.join("eval.jsonl"), report.to_jsonl()?)?;
    std::fs::write(run.out.join("summary.txt"), summary_table(std::slice::from_ref(&report)))?;
    Ok(report)
}
