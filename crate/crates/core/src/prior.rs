//! Synthetic classification tasks and the pretraining loop that teaches the
//! backbone to classify query rows from labeled support rows.
//!
//! Three task families are drawn: a random linear boundary over numerical
//! features, a small random tanh MLP, and a rule over categorical columns
//! (with a weaker numerical contribution). Every task is a pure function of
//! `(PriorConfig, seed)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::metrics::accuracy;
use crate::model::{Model, RowBlock, SupportQueryBatch, TrainableSet};
use crate::optim::{Adam, AdamConfig};
use crate::schema::{Column, FeatureSchema};
use crate::seed::derive_seed;

const MAX_RESAMPLES: u64 = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PriorConfig {
    /// Upper bound on feature columns per task (numerical + categorical).
    pub max_features: usize,
    pub max_categories_per_column: usize,
    pub min_classes: usize,
    pub max_classes: usize,
    pub min_samples: usize,
    pub max_samples: usize,
    /// Probability that a label is replaced by a uniformly random class.
    pub noise: f64,
    /// Probability that a categorical cell is missing.
    pub missing_rate: f64,
    pub weight_linear: f64,
    pub weight_mlp: f64,
    pub weight_categorical: f64,
    /// Tasks where some class holds less than this fraction of rows are
    /// redrawn.
    pub min_class_fraction: f64,
    /// Base of the pretraining task stream; task `e` uses
    /// `derive_seed(seed, e)`.
    pub seed: u64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        PriorConfig {
            max_features: 6,
            max_categories_per_column: 5,
            min_classes: 2,
            max_classes: 3,
            min_samples: 24,
            max_samples: 64,
            noise: 0.0,
            missing_rate: 0.05,
            weight_linear: 0.4,
            weight_mlp: 0.3,
            weight_categorical: 0.3,
            min_class_fraction: 0.1,
            seed: 0,
        }
    }
}

impl PriorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_features == 0 {
            return Err(Error::config("max_features", "must be at least 1"));
        }
        if self.max_categories_per_column < 2 {
            return Err(Error::config("max_categories_per_column", "must be at least 2"));
        }
        if self.min_classes < 2 || self.min_classes > self.max_classes {
            return Err(Error::config("min_classes", "need 2 <= min_classes <= max_classes"));
        }
        if self.min_samples < 4 || self.min_samples > self.max_samples {
            return Err(Error::config("min_samples", "need 4 <= min_samples <= max_samples"));
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return Err(Error::config("noise", "must lie in [0, 1]"));
        }
        if !(0.0..1.0).contains(&self.missing_rate) {
            return Err(Error::config("missing_rate", "must lie in [0, 1)"));
        }
        let w = [self.weight_linear, self.weight_mlp, self.weight_categorical];
        if w.iter().any(|&x| x < 0.0) || (w.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::config("weight_linear", "family weights must be non-negative and sum to 1"));
        }
        if !(0.0..0.5).contains(&self.min_class_fraction) {
            return Err(Error::config("min_class_fraction", "must lie in [0, 0.5)"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskFamily {
    Linear,
    Mlp,
    Categorical,
}

/// The sampled labeling function of a task.
#[derive(Clone, Debug, PartialEq)]
pub enum GroundTruth {
    /// `1` if `w·x + b > 0`, else `0`.
    Linear { weights: Vec<f64>, bias: f64 },
    /// `argmax(tanh(x W1 + b1) W2 − center)`.
    Mlp { w1: Vec<f64>, b1: Vec<f64>, w2: Vec<f64>, hidden: usize, classes: usize, center: Vec<f64> },
    /// `argmax(Σ_j S_j[cat_j] + x W − center)`; category 0 of each column is
    /// the missing value.
    Rule { scores: Vec<Vec<f64>>, num_weights: Vec<f64>, classes: usize, center: Vec<f64> },
}

impl GroundTruth {
    fn logits(&self, num: &[f64], cat: &[usize]) -> Vec<f64> {
        match self {
            GroundTruth::Linear { weights, bias } => {
                vec![0.0, weights.iter().zip(num).map(|(w, x)| w * x).sum::<f64>() + bias]
            }
            GroundTruth::Mlp { w1, b1, w2, hidden, classes, center } => {
                let n = num.len();
                let h: Vec<f64> = (0..*hidden)
                    .map(|k| ((0..n).map(|i| num[i] * w1[i * hidden + k]).sum::<f64>() + b1[k]).tanh())
                    .collect();
                (0..*classes)
                    .map(|c| (0..*hidden).map(|k| h[k] * w2[k * classes + c]).sum::<f64>() - center[c])
                    .collect()
            }
            GroundTruth::Rule { scores, num_weights, classes, center } => (0..*classes)
                .map(|c| {
                    let cat_part: f64 = cat.iter().zip(scores).map(|(&v, s)| s[v * classes + c]).sum();
                    let num_part: f64 = num.iter().enumerate().map(|(i, x)| x * num_weights[i * classes + c]).sum();
                    cat_part + num_part - center[c]
                })
                .collect(),
        }
    }

    /// Noise-free label of one row; `cat` holds per-column category codes
    /// with 0 meaning missing.
    pub fn classify(&self, num: &[f64], cat: &[usize]) -> usize {
        let l = self.logits(num, cat);
        let mut best = 0;
        for k in 1..l.len() {
            if l[k] > l[best] {
                best = k;
            }
        }
        best
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticTask {
    pub family: TaskFamily,
    pub seed: u64,
    /// Number of degenerate draws skipped before this one.
    pub resamples: u64,
    pub schema: FeatureSchema,
    pub x: RowBlock,
    pub labels: Vec<usize>,
    pub n_classes: usize,
    pub truth: GroundTruth,
    /// Per-column category codes (0 = missing) before offsetting into the
    /// token table; kept so `truth` can be re-evaluated.
    pub category_codes: Vec<usize>,
}

fn pick_family<R: Rng>(cfg: &PriorConfig, rng: &mut R) -> TaskFamily {
    let u: f64 = rng.random();
    if u < cfg.weight_linear {
        TaskFamily::Linear
    } else if u < cfg.weight_linear + cfg.weight_mlp {
        TaskFamily::Mlp
    } else {
        TaskFamily::Categorical
    }
}

fn normals<R: Rng>(n: usize, std: f64, rng: &mut R) -> Vec<f64> {
    (0..n).map(|_| std * { let z: f64 = StandardNormal.sample(rng); z }).collect::<Vec<f64>>()
}

fn column_means(logits: &[Vec<f64>], classes: usize) -> Vec<f64> {
    (0..classes).map(|c| logits.iter().map(|l| l[c]).sum::<f64>() / logits.len() as f64).collect()
}

/// Draws one task. Degenerate draws (a class below `min_class_fraction`)
/// are redrawn from derived sub-seeds, up to a fixed bound.
pub fn sample_task(cfg: &PriorConfig, seed: u64) -> Result<SyntheticTask> {
    cfg.validate()?;
    for attempt in 0..MAX_RESAMPLES {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, attempt));
        let family = pick_family(cfg, &mut rng);
        let task = draw(cfg, family, &mut rng, seed, attempt);
        let mut counts = vec![0usize; task.n_classes];
        for &y in &task.labels {
            counts[y] += 1;
        }
        let min_count = (cfg.min_class_fraction * task.labels.len() as f64).ceil().max(1.0) as usize;
        if counts.iter().all(|&c| c >= min_count) {
            return Ok(task);
        }
    }
    Err(Error::Numeric(format!("task seed {seed}: no balanced draw after {MAX_RESAMPLES} attempts")))
}

fn draw(cfg: &PriorConfig, family: TaskFamily, rng: &mut ChaCha8Rng, seed: u64, attempt: u64) -> SyntheticTask {
    let rows = rng.random_range(cfg.min_samples..=cfg.max_samples);
    let (n, m) = match family {
        TaskFamily::Linear | TaskFamily::Mlp => (rng.random_range(1..=cfg.max_features), 0),
        TaskFamily::Categorical => {
            let m = rng.random_range(1..=cfg.max_features);
            (rng.random_range(0..=cfg.max_features - m), m)
        }
    };
    let classes = match family {
        TaskFamily::Linear => 2,
        _ => rng.random_range(cfg.min_classes..=cfg.max_classes),
    };
    let numeric = normals(rows * n, 1.0, rng);
    let vocab_sizes: Vec<usize> = (0..m).map(|_| rng.random_range(2..=cfg.max_categories_per_column)).collect();
    let mut codes = Vec::with_capacity(rows * m);
    for _ in 0..rows {
        for &k in &vocab_sizes {
            let missing = rng.random::<f64>() < cfg.missing_rate;
            codes.push(if missing { 0 } else { rng.random_range(1..=k) });
        }
    }

    let mut truth = match family {
        TaskFamily::Linear => {
            let weights = normals(n, 1.0, rng);
            let bias = 0.5 * { let z: f64 = StandardNormal.sample(rng); z };
            GroundTruth::Linear { weights, bias }
        }
        TaskFamily::Mlp => {
            let hidden = rng.random_range(4..=16);
            GroundTruth::Mlp {
                w1: normals(n * hidden, 1.5 / (n as f64).sqrt(), rng),
                b1: normals(hidden, 0.5, rng),
                w2: normals(hidden * classes, 1.0, rng),
                hidden,
                classes,
                center: vec![0.0; classes],
            }
        }
        TaskFamily::Categorical => {
            let relevant = rng.random_range(1..=m.min(2));
            let mut chosen: Vec<usize> = (0..m).collect();
            for i in 0..relevant {
                let j = rng.random_range(i..m);
                chosen.swap(i, j);
            }
            let scores = (0..m)
                .map(|j| {
                    let width = (vocab_sizes[j] + 1) * classes;
                    if chosen[..relevant].contains(&j) {
                        normals(width, 1.5, rng)
                    } else {
                        vec![0.0; width]
                    }
                })
                .collect();
            GroundTruth::Rule { scores, num_weights: normals(n * classes, 0.3, rng), classes, center: vec![0.0; classes] }
        }
    };

    let row_logits: Vec<Vec<f64>> = (0..rows)
        .map(|r| truth.logits(&numeric[r * n..(r + 1) * n], &codes[r * m..(r + 1) * m]))
        .collect();
    match &mut truth {
        GroundTruth::Mlp { center, classes, .. } | GroundTruth::Rule { center, classes, .. } => {
            *center = column_means(&row_logits, *classes);
        }
        GroundTruth::Linear { .. } => {}
    }
    let mut labels: Vec<usize> = (0..rows)
        .map(|r| truth.classify(&numeric[r * n..(r + 1) * n], &codes[r * m..(r + 1) * m]))
        .collect();
    if cfg.noise > 0.0 {
        for y in &mut labels {
            if rng.random::<f64>() < cfg.noise {
                *y = rng.random_range(0..classes);
            }
        }
    }

    let mut columns: Vec<Column> = (0..n).map(|i| Column::numerical(format!("x{i}"))).collect();
    columns.extend(
        vocab_sizes
            .iter()
            .enumerate()
            .map(|(j, &k)| Column::categorical(format!("c{j}"), (0..k).map(|v| format!("v{v}")).collect())),
    );
    let schema = FeatureSchema::new(columns).expect("generated vocabularies are distinct");
    let offsets = schema.offsets();
    let categorical = codes
        .iter()
        .enumerate()
        .map(|(i, &code)| if code == 0 { 0 } else { offsets[i % m] + code - 1 })
        .collect();
    SyntheticTask {
        family,
        seed,
        resamples: attempt,
        schema,
        x: RowBlock { rows, n, m, numeric, categorical },
        labels,
        n_classes: classes,
        truth,
        category_codes: codes,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainSettings {
    pub episodes: usize,
    /// Episodes whose gradients are averaged into one optimizer step.
    pub episodes_per_step: usize,
    pub lr: f64,
    /// Linear warmup length in optimizer steps.
    pub warmup_steps: usize,
    pub support_fraction: f64,
    pub heldout_episodes: usize,
    /// Held-out evaluation period in episodes; 0 evaluates only at start and end.
    pub eval_every: usize,
}

impl Default for PretrainSettings {
    fn default() -> Self {
        PretrainSettings {
            episodes: 2000,
            episodes_per_step: 4,
            lr: 1e-3,
            warmup_steps: 25,
            support_fraction: 0.7,
            heldout_episodes: 32,
            eval_every: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub episode: usize,
    pub seed: u64,
    pub family: TaskFamily,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeldoutRecord {
    /// Episodes trained before this evaluation.
    pub episode: usize,
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PretrainLog {
    pub episodes: Vec<EpisodeRecord>,
    pub heldout: Vec<HeldoutRecord>,
}

const HELDOUT_STREAM: u64 = 0x4845_4C44;

/// Builds the in-context episode for a task, with a fresh token table and
/// identifiers installed on `model`.
pub fn task_episode(model: &mut Model, task: &SyntheticTask, support_fraction: f64, seed: u64) -> Result<SupportQueryBatch> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    model.attach_categorical(&task.schema, true, &mut rng)?;
    SupportQueryBatch::sample(&task.x, &task.labels, task.n_classes, support_fraction, &mut rng)
}

/// Mean query loss and accuracy over a fixed set of held-out tasks.
pub fn heldout_metrics(model: &Model, cfg: &PriorConfig, settings: &PretrainSettings) -> Result<(f64, f64)> {
    let mut probe = model.clone();
    let (mut loss, mut acc) = (0.0, 0.0);
    let k = settings.heldout_episodes.max(1);
    for i in 0..k {
        let seed = derive_seed(cfg.seed ^ HELDOUT_STREAM, i as u64);
        let task = sample_task(cfg, seed)?;
        let batch = task_episode(&mut probe, &task, settings.support_fraction, seed)?;
        let mut g = Graph::new();
        let logits = probe.forward(&mut g, &batch)?;
        let labels = batch.query_y.as_deref().expect("sampled episodes carry query labels");
        let ce = g.cross_entropy(logits, labels)?;
        loss += g.scalar(ce);
        acc += accuracy(&crate::model::softmax_rows(&g.to_tensor(logits)), labels)?;
    }
    Ok((loss / k as f64, acc / k as f64))
}

/// Trains the backbone on freshly sampled tasks, minimizing query
/// cross-entropy. Query labels enter only the loss.
pub fn pretrain(model: &mut Model, cfg: &PriorConfig, settings: &PretrainSettings) -> Result<PretrainLog> {
    cfg.validate()?;
    if cfg.max_features > model.config.max_numerical {
        return Err(Error::config(
            "max_features",
            format!("{} exceeds the model's {} numerical rows", cfg.max_features, model.config.max_numerical),
        ));
    }
    if cfg.max_classes > model.config.max_classes {
        return Err(Error::config("max_classes", "prior draws more classes than the head has"));
    }
    let mut log = PretrainLog::default();
    if settings.episodes == 0 {
        return Ok(log);
    }
    let saved_schema = model.schema.take();
    model.set_trainable(TrainableSet::Pretrain);
    let per_step = settings.episodes_per_step.max(1);
    let mut adam = Adam::new(AdamConfig::with_lr(settings.lr));

    let (l0, a0) = heldout_metrics(model, cfg, settings)?;
    log.heldout.push(HeldoutRecord { episode: 0, loss: l0, accuracy: a0 });

    for e in 0..settings.episodes {
        let seed = derive_seed(cfg.seed, e as u64);
        let task = sample_task(cfg, seed)?;
        let batch = task_episode(model, &task, settings.support_fraction, seed)?;
        let mut g = Graph::new();
        let logits = model.forward(&mut g, &batch)?;
        let ce = g.cross_entropy(logits, batch.query_y.as_deref().expect("sampled episodes carry query labels"))?;
        let loss = g.scalar(ce);
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss at episode {e} (task seed {seed})")));
        }
        g.backward(ce)?;
        g.accumulate_into(&mut model.store);
        log.episodes.push(EpisodeRecord { episode: e, seed, family: task.family, loss });

        if (e + 1) % per_step == 0 || e + 1 == settings.episodes {
            let step = adam.steps() as usize + 1;
            adam.config.lr = settings.lr * (step as f64 / settings.warmup_steps.max(1) as f64).min(1.0);
            let in_step = (e % per_step) + 1;
            adam.step(&mut model.store, 1.0 / in_step as f64);
        }
        let done = e + 1;
        if (settings.eval_every > 0 && done % settings.eval_every == 0) || done == settings.episodes {
            let (l, a) = heldout_metrics(model, cfg, settings)?;
            log.heldout.push(HeldoutRecord { episode: done, loss: l, accuracy: a });
        }
    }
    // leave a neutral categorical layer behind
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    model.attach_categorical(&FeatureSchema::new(Vec::new())?, true, &mut rng)?;
    model.schema = saved_schema;
    model.store.zero_grad();
    Ok(log)
}

/// Draws a task from the linear family only.
pub fn sample_linear_task(cfg: &PriorConfig, seed: u64) -> Result<SyntheticTask> {
    let linear = PriorConfig { weight_linear: 1.0, weight_mlp: 0.0, weight_categorical: 0.0, ..cfg.clone() };
    sample_task(&linear, seed)
}
