use std::path::PathBuf;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use tabtoken_core::checkpoint;
use tabtoken_core::data::DatasetDescriptor;
use tabtoken_core::finetune::{EpochRecord, FinetuneConfig, Variant};
use tabtoken_core::model::TrainableSet;
use tabtoken_core::protocol::{average_curves, curves_csv, run_protocol, summary_table, RepetitionReport, DEFAULT_REPETITIONS};
use tabtoken_core::Error;

use crate::config::write_resolved;
use crate::write_jsonl;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneRun {
    pub out: PathBuf,
    /// Pretrained backbone.
    pub checkpoint: PathBuf,
    /// Dataset descriptor (TOML).
    pub dataset: PathBuf,
    pub repetitions: usize,
    /// `full`, `no_identifiers`, `no_regularization`, or `all`.
    pub variant: String,
    pub epochs: usize,
    pub lr: f64,
    pub lambda_orth: f64,
    pub trainable: TrainableSet,
    pub support_fraction: f64,
    pub steps_per_epoch: usize,
    pub max_episode_rows: usize,
    pub train_eval_folds: usize,
    pub max_support_rows: usize,
    pub predict_chunk: usize,
    pub seed: u64,
}

impl Default for FinetuneRun {
    fn default() -> Self {
        let f = FinetuneConfig::default();
        FinetuneRun {
            out: PathBuf::from("runs/finetune"),
            checkpoint: PathBuf::from("runs/pretrain/checkpoint.json"),
            dataset: PathBuf::new(),
            repetitions: DEFAULT_REPETITIONS,
            variant: "full".into(),
            epochs: f.epochs,
            lr: f.lr,
            lambda_orth: f.lambda_orth,
            trainable: f.trainable,
            support_fraction: f.support_fraction,
            steps_per_epoch: f.steps_per_epoch,
            max_episode_rows: f.max_episode_rows,
            train_eval_folds: f.train_eval_folds,
            max_support_rows: f.max_support_rows,
            predict_chunk: f.predict_chunk,
            seed: f.seed,
        }
    }
}

impl FinetuneRun {
    pub fn variants(&self) -> Result<Vec<Variant>> {
        if self.variant == "all" {
            return Ok(Variant::ALL.to_vec());
        }
        Ok(vec![self.variant.parse()?])
    }

    pub fn finetune_config(&self, variant: Variant) -> FinetuneConfig {
        FinetuneConfig {
            epochs: self.epochs,
            lr: self.lr,
            lambda_orth: self.lambda_orth,
            variant,
            trainable: self.trainable,
            support_fraction: self.support_fraction,
            steps_per_epoch: self.steps_per_epoch,
            max_episode_rows: self.max_episode_rows,
            train_eval_folds: self.train_eval_folds,
            max_support_rows: self.max_support_rows,
            predict_chunk: self.predict_chunk,
            seed: self.seed,
        }
    }
}

#[derive(Serialize)]
struct EpochLine<'a> {
    record: &'static str,
    variant: Variant,
    seed: u64,
    selected: bool,
    #[serde(flatten)]
    epoch: &'a EpochRecord,
}

/// Runs the repeated protocol for each requested variant. Per variant it
/// writes `report_<variant>.jsonl`, `trainlog_<variant>.jsonl`,
/// `summary_<variant>.txt`, `curves_<variant>.csv` (per-epoch means with
/// equal weight per seed) and one checkpoint per seed; with several
/// variants it also writes `summary.txt` comparing them.
pub fn run(run: &FinetuneRun) -> Result<Vec<RepetitionReport>> {
    let variants = run.variants()?;
    if run.repetitions == 0 {
        return Err(Error::Config { field: "repetitions".into(), msg: "must be at least 1".into() }.into());
    }
    for v in &variants {
        run.finetune_config(*v).validate()?;
    }
    if run.dataset.as_os_str().is_empty() {
        return Err(Error::Config { field: "dataset".into(), msg: "a dataset descriptor is required".into() }.into());
    }
    let descriptor = DatasetDescriptor::from_file(&run.dataset)
        .with_context(|| format!("reading descriptor {}", run.dataset.display()))?;
    let data = descriptor.load().with_context(|| format!("loading {}", descriptor.csv.display()))?;
    let backbone =
        checkpoint::load(&run.checkpoint).with_context(|| format!("loading checkpoint {}", run.checkpoint.display()))?;
    write_resolved(&run.out, run)?;

    let mut reports = Vec::new();
    for v in variants {
        let cfg = run.finetune_config(v);
        let (report, reps) = run_protocol(&descriptor.name, &data, &backbone, &cfg, run.repetitions)
            .with_context(|| format!("variant {}", v.as_str()))?;
        let tag = v.as_str();
        std::fs::write(run.out.join(format!("report_{tag}.jsonl")), report.to_jsonl()?)?;
        std::fs::write(run.out.join(format!("summary_{tag}.txt")), summary_table(std::slice::from_ref(&report)))?;
        let lines = reps.iter().flat_map(|r| {
            r.log.epochs.iter().map(move |e| EpochLine {
                record: "epoch",
                variant: v,
                seed: r.result.seed,
                selected: r.log.selected_epoch == Some(e.epoch),
                epoch: e,
            })
        });
        write_jsonl(&run.out.join(format!("trainlog_{tag}.jsonl")), lines)?;
        let logs: Vec<_> = reps.iter().map(|r| &r.log).collect();
        std::fs::write(run.out.join(format!("curves_{tag}.csv")), curves_csv(&average_curves(&logs)))?;
        for r in &reps {
            checkpoint::save(&r.model, &run.out.join(format!("model_{tag}_seed{}.json", r.result.seed)))?;
        }
        reports.push(report);
    }
    if reports.len() > 1 {
        std::fs::write(run.out.join("summary.txt"), summary_table(&reports))?;
    }
    Ok(reports)
}
