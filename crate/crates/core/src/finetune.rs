//! Downstream fine-tuning with cross-entropy plus orthogonal regularization
//! of the feature identifiers, and best-on-train checkpoint selection.
//!
//! Each optimizer step draws one support/query partition of the training
//! rows. After every epoch the model is scored on the training rows only:
//! they are split into fixed folds and each fold is predicted with the
//! remaining folds as support. Those scores pick the returned checkpoint.
//! When a test set is supplied it is scored too, for the log only.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::EncodedDataset;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::metrics::{accuracy, roc_auc_ovo};
use crate::model::{Model, RowBlock, SupportQueryBatch, TrainableSet, IDS};
use crate::optim::{Adam, AdamConfig};
use crate::seed::derive_seed;
use crate::tensor::{ParamStore, Tensor};
use crate::tokenize::NORM_EPS;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Identifiers plus orthogonal regularization.
    Full,
    /// No identifiers; the regularizer has nothing to act on.
    NoIdentifiers,
    /// Identifiers, but `lambda_orth` is forced to 0.
    NoRegularization,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Full, Variant::NoIdentifiers, Variant::NoRegularization];

    pub fn uses_identifiers(self) -> bool {
        self != Variant::NoIdentifiers
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoIdentifiers => "no_identifiers",
            Variant::NoRegularization => "no_regularization",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::config("variant", format!("unknown variant {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub lr: f64,
    pub lambda_orth: f64,
    pub variant: Variant,
    pub trainable: TrainableSet,
    pub support_fraction: f64,
    pub steps_per_epoch: usize,
    /// Rows drawn per training episode before the support/query split; 0
    /// uses every training row.
    pub max_episode_rows: usize,
    /// Folds used to score the training rows after each epoch.
    pub train_eval_folds: usize,
    /// Support rows used when predicting held-out rows; 0 uses every
    /// training row.
    pub max_support_rows: usize,
    pub predict_chunk: usize,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            epochs: 30,
            lr: 1e-3,
            lambda_orth: 1.0,
            variant: Variant::Full,
            trainable: TrainableSet::FtLayerOnly,
            support_fraction: 0.7,
            steps_per_epoch: 8,
            max_episode_rows: 256,
            train_eval_folds: 4,
            max_support_rows: 512,
            predict_chunk: 256,
            seed: 0,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_orth >= 0.0 && self.lambda_orth.is_finite()) {
            return Err(Error::config("lambda_orth", "must be finite and >= 0"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("lr", "must be positive"));
        }
        if !(self.support_fraction > 0.0 && self.support_fraction < 1.0) {
            return Err(Error::config("support_fraction", "must lie in (0, 1)"));
        }
        if self.steps_per_epoch == 0 {
            return Err(Error::config("steps_per_epoch", "must be at least 1"));
        }
        if self.train_eval_folds < 2 {
            return Err(Error::config("train_eval_folds", "must be at least 2"));
        }
        if self.trainable == TrainableSet::Pretrain {
            return Err(Error::config("trainable", "use ft_layer_only or full_model"));
        }
        Ok(())
    }

    /// The regularization weight actually applied.
    pub fn effective_lambda(&self) -> f64 {
        match self.variant {
            Variant::Full => self.lambda_orth,
            Variant::NoIdentifiers | Variant::NoRegularization => 0.0,
        }
    }
}

/// Scalar nodes of the training objective for one episode.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub total: Var,
    pub cross_entropy: Var,
    pub orthogonal: Option<Var>,
}

/// `CE(query logits, query labels) + lambda · orthogonal_loss(I)`. With
/// `lambda == 0` or no identifiers the total is the cross-entropy node
/// itself.
pub fn total_loss(g: &mut Graph, model: &Model, batch: &SupportQueryBatch, lambda: f64) -> Result<LossParts> {
    let labels = batch
        .query_y
        .as_deref()
        .ok_or_else(|| Error::Precondition("training episode needs query labels".into()))?;
    let logits = model.forward(g, batch)?;
    let ce = g.cross_entropy(logits, labels)?;
    if lambda == 0.0 || !model.has_identifiers() {
        return Ok(LossParts { total: ce, cross_entropy: ce, orthogonal: None });
    }
    let ids = g.param(&model.store, IDS)?;
    let orth = g.orthogonal_loss(ids, NORM_EPS);
    let scaled = g.scale(orth, lambda);
    let total = g.add(ce, scaled)?;
    Ok(LossParts { total, cross_entropy: ce, orthogonal: Some(orth) })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub loss: f64,
    pub accuracy: f64,
    /// `None` when fewer than two classes are present.
    pub auc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean total objective over the epoch's optimizer steps.
    pub step_loss: f64,
    pub orthogonal_loss: Option<f64>,
    pub train: Scores,
    pub test: Option<Scores>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were returned; `None` when no epoch ran.
    pub selected_epoch: Option<usize>,
}

fn scores_from(probs: &Tensor, labels: &[usize]) -> Result<Scores> {
    let loss = labels
        .iter()
        .enumerate()
        .map(|(r, &y)| -probs.data[r * probs.cols() + y].max(f64::MIN_POSITIVE).ln())
        .sum::<f64>()
        / labels.len() as f64;
    let auc = match roc_auc_ovo(probs, labels) {
        Ok(a) => Some(a),
        Err(Error::UndefinedMetric(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(Scores { loss, accuracy: accuracy(probs, labels)?, auc })
}

fn subsample(len: usize, cap: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..len).collect();
    if cap > 0 && len > cap {
        idx.shuffle(rng);
        idx.truncate(cap);
        idx.sort_unstable();
    }
    idx
}

/// Predicts `query` with (a capped subset of) `support` as context.
pub fn predict_with_support(
    model: &Model,
    support: &EncodedDataset,
    query: &RowBlock,
    cfg: &FinetuneConfig,
    seed: u64,
) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let idx = subsample(support.len(), cfg.max_support_rows, &mut rng);
    let s = support.select(&idx);
    let batch = SupportQueryBatch {
        support_x: s.x,
        support_y: s.labels,
        query_x: query.clone(),
        query_y: None,
        n_classes: support.n_classes,
    };
    model.predict_proba_chunked(&batch, cfg.predict_chunk)
}

/// Scores every training row once, each fold predicted from the others.
pub fn train_scores(model: &Model, train: &EncodedDataset, cfg: &FinetuneConfig) -> Result<Scores> {
    let k = cfg.train_eval_folds.min(train.len());
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0xF01D)));
    let mut probs = vec![0.0; train.len() * train.n_classes];
    for f in 0..k {
        let held: Vec<usize> = order.iter().skip(f).step_by(k).copied().collect();
        let rest: Vec<usize> = order.iter().enumerate().filter(|(p, _)| p % k != f).map(|(_, &i)| i).collect();
        let p = predict_with_support(model, &train.select(&rest), &train.x.select(&held), cfg, derive_seed(cfg.seed, f as u64))?;
        for (r, &i) in held.iter().enumerate() {
            probs[i * train.n_classes..(i + 1) * train.n_classes].copy_from_slice(p.row(r));
        }
    }
    scores_from(&Tensor::new(vec![train.len(), train.n_classes], probs)?, &train.labels)
}

pub fn test_scores(model: &Model, train: &EncodedDataset, test: &EncodedDataset, cfg: &FinetuneConfig) -> Result<Scores> {
    let p = predict_with_support(model, train, &test.x, cfg, derive_seed(cfg.seed, 0x7E57))?;
    scores_from(&p, &test.labels)
}

/// `a` beats `b`: higher AUC (a defined AUC beats none), then lower loss.
fn better(a: &Scores, b: &Scores) -> bool {
    match (a.auc, b.auc) {
        (Some(x), Some(y)) if x != y => x > y,
        (Some(_), None) => true,
        (None, Some(_)) => false,
        _ => a.loss < b.loss,
    }
}

fn trainable_snapshot(store: &ParamStore) -> Vec<(String, Tensor)> {
    store
        .iter()
        .filter(|(_, p)| p.tensor.requires_grad)
        .map(|(n, p)| (n.to_string(), p.tensor.clone()))
        .collect()
}

/// Fine-tunes `model` (whose categorical layer must already match
/// `train.schema`) and leaves it at the best-on-train epoch.
pub fn finetune(
    model: &mut Model,
    train: &EncodedDataset,
    test: Option<&EncodedDataset>,
    cfg: &FinetuneConfig,
) -> Result<TrainLog> {
    cfg.validate()?;
    if model.schema.as_ref() != Some(&train.schema) {
        return Err(Error::Schema("model categorical layer is not bound to this dataset's schema".into()));
    }
    if model.has_identifiers() != cfg.variant.uses_identifiers() {
        return Err(Error::config("variant", "identifier presence does not match the variant"));
    }
    if train.n_classes > model.config.max_classes {
        return Err(Error::Schema(format!("{} classes exceed the head's {}", train.n_classes, model.config.max_classes)));
    }
    if train.len() < 2 {
        return Err(Error::Precondition("fine-tuning needs at least two training rows".into()));
    }
    let mut log = TrainLog::default();
    if cfg.epochs == 0 {
        return Ok(log);
    }
    model.set_trainable(cfg.trainable);
    model.store.zero_grad();
    let lambda = cfg.effective_lambda();
    let mut adam = Adam::new(AdamConfig::with_lr(cfg.lr));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Option<(Scores, Vec<(String, Tensor)>)> = None;

    for epoch in 1..=cfg.epochs {
        let mut step_loss = 0.0;
        let mut orth_last = None;
        for step in 0..cfg.steps_per_epoch {
            let rows = subsample(train.len(), cfg.max_episode_rows, &mut rng);
            let part = train.select(&rows);
            let batch = SupportQueryBatch::sample(&part.x, &part.labels, part.n_classes, cfg.support_fraction, &mut rng)?;
            let mut g = Graph::new();
            let parts = total_loss(&mut g, model, &batch, lambda)?;
            let loss = g.scalar(parts.total);
            if !loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss at epoch {epoch} step {step} (seed {})",
                    cfg.seed
                )));
            }
            step_loss += loss;
            orth_last = parts.orthogonal.map(|o| g.scalar(o));
            g.backward(parts.total)?;
            g.accumulate_into(&mut model.store);
            adam.step(&mut model.store, 1.0);
        }
        let train_s = train_scores(model, train, cfg)?;
        let test_s = test.map(|t| test_scores(model, train, t, cfg)).transpose()?;
        if best.as_ref().is_none_or(|(b, _)| better(&train_s, b)) {
            best = Some((train_s.clone(), trainable_snapshot(&model.store)));
            log.selected_epoch = Some(epoch);
        }
        log.epochs.push(EpochRecord {
            epoch,
            step_loss: step_loss / cfg.steps_per_epoch as f64,
            orthogonal_loss: orth_last,
            train: train_s,
            test: test_s,
        });
    }
    if let Some((_, snapshot)) = best {
        for (name, t) in snapshot {
            *model.store.get_mut(&name)? = t;
        }
    }
    Ok(log)
}
