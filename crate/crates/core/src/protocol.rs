//! Repeated train/test evaluation: for each seed, split 50/50, fit the
//! schema on the training half, attach a fresh categorical layer to a copy of
//! the backbone, fine-tune, and score the selected checkpoint on the test
//! half.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{encode, fit_schema, split_indices, NormStats, RawDataset};
use crate::error::{Error, Result};
use crate::finetune::{finetune, test_scores, FinetuneConfig, Scores, TrainLog, Variant};
use crate::model::Model;
use crate::schema::FeatureSchema;
use crate::seed::derive_seed;

pub const DEFAULT_REPETITIONS: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub train_rows: usize,
    pub test_rows: usize,
    pub selected_epoch: Option<usize>,
    pub train_auc: Option<f64>,
    pub test_auc: Option<f64>,
    pub test_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepetitionReport {
    pub dataset: String,
    pub variant: Variant,
    pub seeds: Vec<SeedResult>,
    /// Mean over seeds with a defined test AUC.
    pub mean_auc: Option<f64>,
    pub mean_accuracy: f64,
}

impl RepetitionReport {
    pub fn new(dataset: impl Into<String>, variant: Variant, seeds: Vec<SeedResult>) -> Self {
        let aucs: Vec<f64> = seeds.iter().filter_map(|s| s.test_auc).collect();
        let mean_auc = (!aucs.is_empty()).then(|| aucs.iter().sum::<f64>() / aucs.len() as f64);
        let mean_accuracy = seeds.iter().map(|s| s.test_accuracy).sum::<f64>() / seeds.len().max(1) as f64;
        RepetitionReport { dataset: dataset.into(), variant, seeds, mean_auc, mean_accuracy }
    }

    /// One JSON object per seed, then one summary object.
    pub fn to_jsonl(&self) -> Result<String> {
        #[derive(Serialize)]
        struct SeedLine<'a> {
            record: &'static str,
            dataset: &'a str,
            variant: Variant,
            #[serde(flatten)]
            result: &'a SeedResult,
        }
        #[derive(Serialize)]
        struct SummaryLine<'a> {
            record: &'static str,
            dataset: &'a str,
            variant: Variant,
            repetitions: usize,
            mean_auc: Option<f64>,
            mean_accuracy: f64,
        }
        let mut out = String::new();
        let enc = |e: serde_json::Error| Error::Checkpoint(e.to_string());
        for s in &self.seeds {
            let line = SeedLine { record: "seed", dataset: &self.dataset, variant: self.variant, result: s };
            out.push_str(&serde_json::to_string(&line).map_err(enc)?);
            out.push('\n');
        }
        let summary = SummaryLine {
            record: "summary",
            dataset: &self.dataset,
            variant: self.variant,
            repetitions: self.seeds.len(),
            mean_auc: self.mean_auc,
            mean_accuracy: self.mean_accuracy,
        };
        out.push_str(&serde_json::to_string(&summary).map_err(enc)?);
        out.push('\n');
        Ok(out)
    }
}

/// Everything one repetition produced.
#[derive(Clone, Debug)]
pub struct Repetition {
    pub result: SeedResult,
    pub schema: FeatureSchema,
    pub stats: NormStats,
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
    pub log: TrainLog,
    pub model: Model,
    pub test: Scores,
}

/// One seeded repetition. Only the training half reaches schema fitting,
/// optimization and checkpoint selection.
pub fn run_repetition(data: &RawDataset, backbone: &Model, cfg: &FinetuneConfig, seed: u64) -> Result<Repetition> {
    if data.len() < 4 {
        return Err(Error::Precondition(format!("{} rows are too few for a 50/50 protocol", data.len())));
    }
    let (train_idx, test_idx) = split_indices(data.len(), seed);
    let (train_raw, test_raw) = (data.subset(&train_idx), data.subset(&test_idx));
    let (schema, stats) = fit_schema(&train_raw)?;
    let train = encode(&train_raw, &schema, &stats)?;
    let test = encode(&test_raw, &schema, &stats)?;

    let mut model = backbone.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0xCA7));
    model.attach_categorical(&schema, cfg.variant.uses_identifiers(), &mut rng)?;
    model.stats = Some(stats.clone());
    let run_cfg = FinetuneConfig { seed, ..cfg.clone() };
    let log = finetune(&mut model, &train, Some(&test), &run_cfg)?;
    let test_s = test_scores(&model, &train, &test, &run_cfg)?;
    let train_auc = log.selected_epoch.and_then(|e| log.epochs[e - 1].train.auc);
    Ok(Repetition {
        result: SeedResult {
            seed,
            train_rows: train.len(),
            test_rows: test.len(),
            selected_epoch: log.selected_epoch,
            train_auc,
            test_auc: test_s.auc,
            test_accuracy: test_s.accuracy,
        },
        schema,
        stats,
        train_indices: train_idx,
        test_indices: test_idx,
        log,
        model,
        test: test_s,
    })
}

/// Runs `repetitions` repetitions with seeds `cfg.seed, cfg.seed + 1, ...`.
pub fn run_protocol(
    name: &str,
    data: &RawDataset,
    backbone: &Model,
    cfg: &FinetuneConfig,
    repetitions: usize,
) -> Result<(RepetitionReport, Vec<Repetition>)> {
    let runs = (0..repetitions as u64)
        .map(|k| run_repetition(data, backbone, cfg, cfg.seed.wrapping_add(k)))
        .collect::<Result<Vec<_>>>()?;
    let report = RepetitionReport::new(name, cfg.variant, runs.iter().map(|r| r.result.clone()).collect());
    Ok((report, runs))
}

/// Per-variant aggregates across datasets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub variant: Variant,
    /// Mean of the per-dataset mean AUCs.
    pub mean_auc: Option<f64>,
    /// Mean rank across datasets (1 = best mean AUC; ties share the average
    /// rank).
    pub mean_rank: Option<f64>,
}

fn variants_in(reports: &[RepetitionReport]) -> Vec<Variant> {
    Variant::ALL.into_iter().filter(|v| reports.iter().any(|r| r.variant == *v)).collect()
}

fn datasets_in(reports: &[RepetitionReport]) -> Vec<&str> {
    let mut names: Vec<&str> = Vec::new();
    for r in reports {
        if !names.contains(&r.dataset.as_str()) {
            names.push(&r.dataset);
        }
    }
    names
}

fn lookup<'a>(reports: &'a [RepetitionReport], dataset: &str, v: Variant) -> Option<&'a RepetitionReport> {
    reports.iter().find(|r| r.dataset == dataset && r.variant == v)
}

pub fn compare_variants(reports: &[RepetitionReport]) -> Vec<ComparisonRow> {
    let variants = variants_in(reports);
    let datasets = datasets_in(reports);
    let mut rank_sum = vec![0.0; variants.len()];
    let mut rank_n = vec![0usize; variants.len()];
    for d in &datasets {
        let aucs: Vec<Option<f64>> =
            variants.iter().map(|&v| lookup(reports, d, v).and_then(|r| r.mean_auc)).collect();
        if aucs.iter().any(Option::is_none) {
            continue;
        }
        let aucs: Vec<f64> = aucs.into_iter().flatten().collect();
        for (k, &a) in aucs.iter().enumerate() {
            let higher = aucs.iter().filter(|&&b| b > a).count() as f64;
            let equal = aucs.iter().filter(|&&b| b == a).count() as f64;
            rank_sum[k] += higher + (equal + 1.0) / 2.0;
            rank_n[k] += 1;
        }
    }
    variants
        .iter()
        .enumerate()
        .map(|(k, &v)| {
            let aucs: Vec<f64> = datasets.iter().filter_map(|d| lookup(reports, d, v).and_then(|r| r.mean_auc)).collect();
            ComparisonRow {
                variant: v,
                mean_auc: (!aucs.is_empty()).then(|| aucs.iter().sum::<f64>() / aucs.len() as f64),
                mean_rank: (rank_n[k] > 0).then(|| rank_sum[k] / rank_n[k] as f64),
            }
        })
        .collect()
}

/// Plain-text table: one row per dataset with each variant's mean test
/// AUC (OVO), then mean AUC and mean rank rows.
pub fn summary_table(reports: &[RepetitionReport]) -> String {
    let variants = variants_in(reports);
    let datasets = datasets_in(reports);
    let fmt = |x: Option<f64>| x.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
    let width = datasets.iter().map(|d| d.len()).chain([13]).max().unwrap_or(13);
    let mut out = String::new();
    let _ = write!(out, "{:<width$}", "dataset");
    for v in &variants {
        let _ = write!(out, " | {:>17}", v.as_str());
    }
    out.push('\n');
    for d in &datasets {
        let _ = write!(out, "{d:<width$}");
        for &v in &variants {
            let _ = write!(out, " | {:>17}", fmt(lookup(reports, d, v).and_then(|r| r.mean_auc)));
        }
        out.push('\n');
    }
    let rows = compare_variants(reports);
    let _ = write!(out, "{:<width$}", "Mean AUC OVO");
    for r in &rows {
        let _ = write!(out, " | {:>17}", fmt(r.mean_auc));
    }
    out.push('\n');
    let _ = write!(out, "{:<width$}", "Mean rank");
    for r in &rows {
        let _ = write!(out, " | {:>17}", r.mean_rank.map_or_else(|| "-".to_string(), |v| format!("{v:.2}")));
    }
    out.push('\n');
    out
}

/// Per-epoch metrics averaged over several training logs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub epoch: usize,
    /// Logs that reached this epoch.
    pub logs: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub train_auc: Option<f64>,
    pub test_accuracy: Option<f64>,
    pub test_auc: Option<f64>,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Averages each epoch across `logs`, one equal weight per log. Undefined
/// AUCs are skipped; an average over no values is `None`.
pub fn average_curves(logs: &[&TrainLog]) -> Vec<CurvePoint> {
    let epochs = logs.iter().map(|l| l.epochs.len()).max().unwrap_or(0);
    (0..epochs)
        .map(|e| {
            let recs: Vec<_> = logs.iter().filter_map(|l| l.epochs.get(e)).collect();
            CurvePoint {
                epoch: e + 1,
                logs: recs.len(),
                train_loss: mean(recs.iter().map(|r| r.train.loss)).unwrap_or(f64::NAN),
                train_accuracy: mean(recs.iter().map(|r| r.train.accuracy)).unwrap_or(f64::NAN),
                train_auc: mean(recs.iter().filter_map(|r| r.train.auc)),
                test_accuracy: mean(recs.iter().filter_map(|r| r.test.as_ref().map(|t| t.accuracy))),
                test_auc: mean(recs.iter().filter_map(|r| r.test.as_ref().and_then(|t| t.auc))),
            }
        })
        .collect()
}

/// CSV with one row per epoch; empty cells for undefined values.
pub fn curves_csv(points: &[CurvePoint]) -> String {
    let opt = |x: Option<f64>| x.map_or_else(String::new, |v| v.to_string());
    let mut out = String::from("epoch,logs,train_loss,train_accuracy,train_auc,test_accuracy,test_auc\n");
    for p in points {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            p.epoch,
            p.logs,
            p.train_loss,
            p.train_accuracy,
            opt(p.train_auc),
            opt(p.test_accuracy),
            opt(p.test_auc)
        );
    }
    out
}
