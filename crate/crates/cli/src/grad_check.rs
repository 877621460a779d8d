use std::path::PathBuf;

use anyhow::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tabtoken_core::finetune::total_loss;
use tabtoken_core::gradcheck::grad_check_with_hook;
use tabtoken_core::model::{IDS, W_CAT, W_NUM, W_Y};
use tabtoken_core::schema::{Column, FeatureSchema};
use tabtoken_core::tokenize::NAN_ROW;
use tabtoken_core::{Error, Model, ModelConfig, RowBlock, SupportQueryBatch};

use crate::config::write_resolved;
use crate::write_jsonl;

pub const COMPONENTS: [&str; 4] = ["ft_layer", "encoder", "label_embedder", "total_loss"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradCheckRun {
    /// Output directory; empty prints to stdout only.
    pub out: PathBuf,
    pub seed: u64,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub max_classes: usize,
    pub numerical: usize,
    /// Vocabulary size of each categorical column.
    pub categories: Vec<usize>,
    pub support: usize,
    pub query: usize,
    pub lambda_orth: f64,
    pub eps: f64,
    pub tolerance: f64,
    pub components: Vec<String>,
    /// Test hook: flips the sign of this component's analytic gradient.
    pub inject_fault: String,
}

impl Default for GradCheckRun {
    fn default() -> Self {
        GradCheckRun {
            out: PathBuf::new(),
            seed: 0,
            d_model: 8,
            layers: 2,
            heads: 2,
            ff_dim: 16,
            max_classes: 3,
            numerical: 2,
            categories: vec![3, 2],
            support: 3,
            query: 2,
            lambda_orth: 1.0,
            eps: 1e-5,
            tolerance: 1e-4,
            components: COMPONENTS.iter().map(|s| s.to_string()).collect(),
            inject_fault: String::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComponentReport {
    pub component: String,
    pub parameters: Vec<String>,
    pub entries: usize,
    pub max_rel_error: f64,
    /// `name[index]` of the worst entry.
    pub worst: Option<String>,
    pub passed: bool,
}

fn usage(field: &str, msg: impl Into<String>) -> anyhow::Error {
    Error::Config { field: field.into(), msg: msg.into() }.into()
}

fn component_params(component: &str, model: &Model) -> Vec<String> {
    let names = model.store.names().map(str::to_owned);
    match component {
        "ft_layer" => names.filter(|n| n == W_NUM || n == W_CAT || n == IDS).collect(),
        "encoder" => names.filter(|n| n.starts_with("enc.") || n.starts_with("final_ln.")).collect(),
        "label_embedder" => names.filter(|n| n == W_Y).collect(),
        _ => names.collect(),
    }
}

fn build(run: &GradCheckRun) -> Result<(Model, SupportQueryBatch)> {
    let cfg = ModelConfig {
        d_model: run.d_model,
        layers: run.layers,
        heads: run.heads,
        ff_dim: run.ff_dim,
        max_classes: run.max_classes,
        max_numerical: run.numerical.max(1),
    };
    if run.support == 0 || run.query == 0 {
        return Err(usage("support", "need at least one support and one query row"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(run.seed);
    let mut model = Model::new(cfg, &mut rng)?;
    let mut cols: Vec<Column> = (0..run.numerical).map(|i| Column::numerical(format!("x{i}"))).collect();
    for (j, &k) in run.categories.iter().enumerate() {
        cols.push(Column::categorical(format!("c{j}"), (0..k).map(|v| format!("v{v}")).collect()));
    }
    let schema = FeatureSchema::new(cols)?;
    model.attach_categorical(&schema, true, &mut rng)?;
    let offsets = schema.offsets();
    let mut rows = |count: usize| -> Result<RowBlock> {
        let numeric = (0..count * run.numerical).map(|_| rng.random_range(-2.0..2.0)).collect();
        let mut categorical = Vec::new();
        for _ in 0..count {
            for (j, &k) in run.categories.iter().enumerate() {
                let v = rng.random_range(0..=k);
                categorical.push(if v == 0 { NAN_ROW } else { offsets[j] + v - 1 });
            }
        }
        Ok(RowBlock::new(run.numerical, run.categories.len(), numeric, categorical)?)
    };
    let support_x = rows(run.support)?;
    let query_x = rows(run.query)?;
    let batch = SupportQueryBatch {
        support_x,
        support_y: (0..run.support).map(|_| rng.random_range(0..run.max_classes)).collect(),
        query_x,
        query_y: Some((0..run.query).map(|_| rng.random_range(0..run.max_classes)).collect()),
        n_classes: run.max_classes,
    };
    Ok((model, batch))
}

/// Compares analytic and central-difference gradients of the training
/// objective (cross-entropy plus weighted orthogonal loss) per parameter
/// group on one random episode.
pub fn run(run: &GradCheckRun) -> Result<Vec<ComponentReport>> {
    if let Some(bad) = run.components.iter().find(|c| !COMPONENTS.contains(&c.as_str())) {
        return Err(usage("components", format!("unknown component {bad:?}")));
    }
    if !run.inject_fault.is_empty() && !COMPONENTS.contains(&run.inject_fault.as_str()) {
        return Err(usage("inject_fault", format!("unknown component {:?}", run.inject_fault)));
    }
    if !run.out.as_os_str().is_empty() {
        write_resolved(&run.out, run)?;
    }
    let (model, batch) = build(run)?;
    let mut reports = Vec::new();
    for component in &run.components {
        let params = component_params(component, &model);
        let refs: Vec<&str> = params.iter().map(String::as_str).collect();
        let faulty = *component == run.inject_fault;
        let mut store = model.store.clone();
        let report = grad_check_with_hook(
            &mut store,
            &refs,
            run.eps,
            |st, g| {
                let m = Model { store: st.clone(), ..model.clone() };
                Ok(total_loss(g, &m, &batch, run.lambda_orth)?.total)
            },
            |_, grad| {
                if faulty {
                    grad.iter_mut().for_each(|v| *v = -*v);
                }
            },
        )?;
        if report.entries_checked == 0 {
            eprintln!("warning: component {component} has no parameters; passing vacuously");
        }
        let passed = report.passes(run.tolerance);
        reports.push(ComponentReport {
            component: component.clone(),
            parameters: params,
            entries: report.entries_checked,
            max_rel_error: report.max_rel_error,
            worst: report.worst.map(|(n, i)| format!("{n}[{i}]")),
            passed,
        });
    }
    if reports.is_empty() {
        eprintln!("warning: no components selected; passing vacuously");
    }
    if !run.out.as_os_str().is_empty() {
        write_jsonl(&run.out.join("gradcheck.jsonl"), &reports)?;
    }
    Ok(reports)
}

/// Numeric failure naming every component above tolerance.
pub fn ensure_passed(reports: &[ComponentReport], tolerance: f64) -> Result<()> {
    let failed: Vec<String> = reports
        .iter()
        .filter(|r| !r.passed)
        .map(|r| format!("{} ({:.3e})", r.component, r.max_rel_error))
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("gradient check above {tolerance:e}: {}", failed.join(", "))).into())
    }
}
