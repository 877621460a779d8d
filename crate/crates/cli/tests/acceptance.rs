//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero when any criterion fails.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use anyhow::{ensure, Context, Result};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tabtoken_cli::{finetune as cmd_finetune, grad_check, pretrain as cmd_pretrain};
use tabtoken_core::data::{encode, fit_schema, read_csv, split_indices, Cell, RawDataset};
use tabtoken_core::exact_sum::exact_sum;
use tabtoken_core::finetune::{finetune, FinetuneConfig, Variant};
use tabtoken_core::graph::Graph;
use tabtoken_core::metrics::{accuracy, roc_auc_ovo};
use tabtoken_core::model::{softmax_rows, TrainableSet, IDS, W_CAT, W_NUM};
use tabtoken_core::prior::{sample_linear_task, task_episode, PretrainLog, PriorConfig};
use tabtoken_core::protocol::{run_protocol, run_repetition, DEFAULT_REPETITIONS};
use tabtoken_core::schema::{Column, FeatureSchema};
use tabtoken_core::seed::derive_seed;
use tabtoken_core::tokenize::{identifier_gram_matrix, mean_abs_off_diagonal, orthogonal_loss, FeatureIdentifiers, NAN_ROW};
use tabtoken_core::{Model, ModelConfig, RowBlock, SupportQueryBatch, Tensor};

struct Verdict {
    pass: bool,
    details: Vec<String>,
}

impl Verdict {
    fn new(pass: bool, details: Vec<String>) -> Self {
        Verdict { pass, details }
    }
}

// ---------------------------------------------------------------- datasets

/// Two categorical columns over the same strings `a..d` with opposite
/// effects on the label, one weak numerical column and 10% label noise.
fn shared_strings(rows: usize, seed: u64) -> RawDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vals = ["a", "b", "c", "d"];
    let s0 = [1.0, -1.0, 0.5, -0.5];
    let s1 = [-1.0, 1.0, -0.5, 0.5];
    let mut csv = String::from("x,c0,c1,label\n");
    for _ in 0..rows {
        let (i, j) = (rng.random_range(0..4), rng.random_range(0..4));
        let x: f64 = rng.random_range(-1.0..1.0);
        let mut y = u8::from(s0[i] + s1[j] + 0.5 * x > 0.0);
        if rng.random::<f64>() < 0.1 {
            y = 1 - y;
        }
        csv.push_str(&format!("{x},{},{},{y}\n", vals[i], vals[j]));
    }
    read_csv(csv.as_bytes(), "label", &["c0", "c1"]).unwrap()
}

/// Six categorical columns over `v0..v2`; the label depends on three.
fn many_categoricals(rows: usize, seed: u64) -> RawDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = 6;
    let names: Vec<String> = (0..m).map(|j| format!("c{j}")).collect();
    let mut csv = names.join(",") + ",label\n";
    for _ in 0..rows {
        let v: Vec<usize> = (0..m).map(|_| rng.random_range(0..3)).collect();
        let y = u8::from((v[0] + v[1]) % 3 == 0) ^ u8::from(v[2] == 1);
        let cells: Vec<String> = v.iter().map(|k| format!("v{k}")).collect();
        csv.push_str(&format!("{},{y}\n", cells.join(",")));
    }
    let refs: Vec<&str> = names.iter().map(String::as_str).collect();
    read_csv(csv.as_bytes(), "label", &refs).unwrap()
}

/// Mixed numerical/categorical three-class data with missing cells.
fn mixed(rows: usize, seed: u64) -> RawDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let colors = ["red", "green", "blue"];
    let mut csv = String::from("x0,x1,color,label\n");
    for _ in 0..rows {
        let x0: f64 = rng.random_range(-2.0..2.0);
        let x1: f64 = rng.random_range(-2.0..2.0);
        let c = rng.random_range(0..3);
        let y = if x0 + 0.5 * c as f64 > 1.0 { "hi" } else if x1 > 0.0 { "mid" } else { "lo" };
        let x1s = if rng.random::<f64>() < 0.05 { String::new() } else { x1.to_string() };
        let cs = if rng.random::<f64>() < 0.05 { "?" } else { colors[c] };
        csv.push_str(&format!("{x0},{x1s},{cs},{y}\n"));
    }
    read_csv(csv.as_bytes(), "label", &["color"]).unwrap()
}

fn write_dataset(dir: &Path, name: &str, data: &RawDataset) -> Result<std::path::PathBuf> {
    let mut csv: String = data.columns.iter().map(|(n, _)| n.clone()).collect::<Vec<_>>().join(",");
    csv.push_str(",label\n");
    for (row, &t) in data.rows.iter().zip(&data.targets) {
        let cells: Vec<String> = row
            .iter()
            .map(|c| match c {
                Cell::Number(v) => v.to_string(),
                Cell::Text(s) => s.clone(),
                Cell::Missing => String::new(),
            })
            .collect();
        csv.push_str(&format!("{},{}\n", cells.join(","), data.classes[t]));
    }
    std::fs::write(dir.join(format!("{name}.csv")), csv)?;
    let categorical: Vec<String> = data
        .columns
        .iter()
        .filter(|(_, k)| *k == tabtoken_core::FeatureKind::Categorical)
        .map(|(n, _)| format!("{n:?}"))
        .collect();
    let descriptor = dir.join(format!("{name}.toml"));
    std::fs::write(
        &descriptor,
        format!("name = \"{name}\"\ncsv = \"{name}.csv\"\ntarget = \"label\"\ncategorical = [{}]\n", categorical.join(", ")),
    )?;
    Ok(descriptor)
}

// ------------------------------------------------------------- criterion 1

fn gradient_correctness() -> Result<Verdict> {
    let dir = tempfile::tempdir()?;
    let start = Instant::now();
    let out = Command::new(env!("CARGO_BIN_EXE_tabtoken"))
        .args(["grad-check", "--out"])
        .arg(dir.path())
        .output()
        .context("running tabtoken grad-check")?;
    let elapsed = start.elapsed();
    let text = std::fs::read_to_string(dir.path().join("gradcheck.jsonl"))?;
    let reports: Vec<grad_check::ComponentReport> =
        text.lines().map(serde_json::from_str).collect::<std::result::Result<_, _>>()?;
    let mut details = Vec::new();
    let mut pass = out.status.success() && elapsed < Duration::from_secs(60);
    for want in grad_check::COMPONENTS {
        match reports.iter().find(|r| r.component == want) {
            Some(r) => {
                pass &= r.entries > 0 && r.max_rel_error < 1e-4;
                details.push(format!("{want}: {} entries, max rel error {:.2e}", r.entries, r.max_rel_error));
            }
            None => {
                pass = false;
                details.push(format!("{want}: missing"));
            }
        }
    }
    details.push(format!("exit {:?}, {:.1}s", out.status.code(), elapsed.as_secs_f64()));
    Ok(Verdict::new(pass, details))
}

// ------------------------------------------------------------- criterion 2

/// Sum over ordered pairs of squared cosines.
fn orth_brute_force(rows: &[Vec<f64>]) -> f64 {
    let norm = |r: &[f64]| r.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    let mut total = 0.0;
    for (i, a) in rows.iter().enumerate() {
        for (j, b) in rows.iter().enumerate() {
            if i != j {
                let cos = a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (norm(a) * norm(b));
                total += cos * cos;
            }
        }
    }
    total
}

fn ids_of(rows: &[Vec<f64>]) -> FeatureIdentifiers {
    FeatureIdentifiers(Tensor::from_rows(rows).unwrap())
}

fn orthogonal_oracle() -> Result<Verdict> {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let mut worst: f64 = 0.0;
    for k in 0..100 {
        let m = rng.random_range(1..=8);
        let d = rng.random_range(1..=32);
        let mut rows: Vec<Vec<f64>> = (0..m).map(|_| (0..d).map(|_| rng.random_range(-3.0..3.0)).collect()).collect();
        if k % 10 == 0 {
            rows[0].fill(0.0);
        }
        worst = worst.max((orthogonal_loss(&ids_of(&rows)) - orth_brute_force(&rows)).abs());
    }

    let mut orthonormal_worst: f64 = 0.0;
    let mut basis_exact = true;
    for d in 1..=8 {
        for m in 1..=d {
            let eye: Vec<Vec<f64>> = (0..m).map(|i| (0..d).map(|c| f64::from(u8::from(c == i))).collect()).collect();
            basis_exact &= orthogonal_loss(&ids_of(&eye)) == 0.0;
            // Gram-Schmidt on random vectors
            let mut q: Vec<Vec<f64>> = Vec::new();
            while q.len() < m {
                let mut v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
                for u in &q {
                    let p: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                    v.iter_mut().zip(u).for_each(|(a, b)| *a -= p * b);
                }
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if n > 1e-3 {
                    q.push(v.iter().map(|x| x / n).collect());
                }
            }
            orthonormal_worst = orthonormal_worst.max(orthogonal_loss(&ids_of(&q)));
        }
    }

    let duplicates = [vec![1.0, 0.0], vec![0.5, 0.5, 0.5, 0.5], vec![0.0, -4.0, 0.0]];
    let dup_exact = duplicates.iter().all(|r| orthogonal_loss(&ids_of(&[r.clone(), r.clone()])) == 2.0);

    let pass = worst <= 1e-10 && basis_exact && orthonormal_worst <= 1e-10 && dup_exact;
    Ok(Verdict::new(
        pass,
        vec![
            format!("max |loss - oracle| over 100 instances: {worst:.2e}"),
            format!("standard basis exactly 0: {basis_exact}; Gram-Schmidt bases max {orthonormal_worst:.2e}"),
            format!("duplicated rows give exactly 2.0: {dup_exact}"),
        ],
    ))
}

// ------------------------------------------------------------- criterion 3

/// Hand-Till over all ordered pairs of rows.
fn auc_pairwise(probs: &Tensor, labels: &[usize]) -> Option<f64> {
    let c = probs.cols();
    let s = |r: usize, k: usize| probs.data[r * c + k];
    let a = |i: usize, j: usize| {
        let (mut wins, mut pairs) = (0.0, 0.0);
        for p in (0..labels.len()).filter(|&p| labels[p] == i) {
            for n in (0..labels.len()).filter(|&n| labels[n] == j) {
                pairs += 1.0;
                wins += match s(p, i).partial_cmp(&s(n, i)).unwrap() {
                    std::cmp::Ordering::Greater => 1.0,
                    std::cmp::Ordering::Equal => 0.5,
                    std::cmp::Ordering::Less => 0.0,
                };
            }
        }
        wins / pairs
    };
    let present: Vec<usize> = (0..c).filter(|k| labels.contains(k)).collect();
    let mut sum = 0.0;
    let mut count = 0;
    for x in 0..present.len() {
        for y in x + 1..present.len() {
            let (i, j) = (present[x], present[y]);
            sum += (a(i, j) + a(j, i)) / 2.0;
            count += 1;
        }
    }
    (count > 0).then(|| sum / count as f64)
}

fn auc_oracle() -> Result<Verdict> {
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    let (mut checked, mut tied, mut mismatches) = (0, 0, 0);
    while checked < 200 {
        let q = rng.random_range(2..=50);
        let c = rng.random_range(2..=4);
        let coarse = checked % 2 == 0;
        let data: Vec<f64> = (0..q * c)
            .map(|_| if coarse { f64::from(rng.random_range(0..4u8)) / 4.0 } else { rng.random::<f64>() })
            .collect();
        let probs = Tensor::new(vec![q, c], data)?;
        let labels: Vec<usize> = (0..q).map(|_| rng.random_range(0..c)).collect();
        let Some(want) = auc_pairwise(&probs, &labels) else { continue };
        let got = roc_auc_ovo(&probs, &labels)?;
        if got.to_bits() != want.to_bits() {
            mismatches += 1;
        }
        tied += usize::from(coarse);
        checked += 1;
    }
    Ok(Verdict::new(mismatches == 0, vec![format!("{checked} instances ({tied} with tied scores), {mismatches} mismatches")]))
}

// ------------------------------------------------------------- criterion 4

fn freeze_contracts(backbone: &Model) -> Result<Verdict> {
    let data = mixed(160, 4);
    let mut details = Vec::new();
    let mut pass = true;
    for trainable in [TrainableSet::FtLayerOnly, TrainableSet::FullModel] {
        let seed = 0;
        let (train_idx, test_idx) = split_indices(data.len(), seed);
        let (train_raw, test_raw) = (data.subset(&train_idx), data.subset(&test_idx));
        let (schema, stats) = fit_schema(&train_raw)?;
        let train = encode(&train_raw, &schema, &stats)?;
        let test = encode(&test_raw, &schema, &stats)?;
        let mut model = backbone.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0xCA7));
        model.attach_categorical(&schema, true, &mut rng)?;
        model.stats = Some(stats);
        let w_num_before = model.store.get(W_NUM)?.data.clone();
        let nan_before = model.store.get(W_CAT)?.row(NAN_ROW).to_vec();
        let cat_before = model.store.get(W_CAT)?.data.clone();
        let cfg = FinetuneConfig { trainable, seed, ..Default::default() };
        let log = finetune(&mut model, &train, Some(&test), &cfg)?;
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        let w_num_same = bits(&model.store.get(W_NUM)?.data) == bits(&w_num_before);
        let nan_same = bits(model.store.get(W_CAT)?.row(NAN_ROW)) == bits(&nan_before);
        let table_moved = model.store.get(W_CAT)?.data != cat_before;
        pass &= w_num_same && nan_same && table_moved && log.epochs.len() == 30;
        details.push(format!(
            "{trainable:?}: {} epochs, W_num identical {w_num_same}, NaN row identical {nan_same}, other rows trained {table_moved}",
            log.epochs.len()
        ));
        if let (Some(first), Some(last)) = (log.epochs.first(), log.epochs.last()) {
            details.push(format!(
                "{trainable:?}: train loss epoch 1 {:.4} -> epoch {} {:.4}",
                first.train.loss, last.epoch, last.train.loss
            ));
        }
    }
    Ok(Verdict::new(pass, details))
}

// ------------------------------------------------------------- criterion 5

fn in_context_learning(model: &Model, log: &PretrainLog, elapsed: Duration) -> Result<Verdict> {
    let prior = PriorConfig { noise: 0.0, ..Default::default() };
    let mut model = model.clone();
    let (mut acc, mut base) = (0.0, 0.0);
    let tasks = 100;
    for i in 0..tasks {
        let task = sample_linear_task(&prior, derive_seed(0x11E7, i))?;
        let batch = task_episode(&mut model, &task, 0.7, derive_seed(0xE915, i))?;
        let probs = softmax_rows(&model.predict_logits(&batch)?);
        let y = batch.query_y.as_ref().context("query labels")?;
        acc += accuracy(&probs, y)?;
        let mut counts = vec![0usize; batch.n_classes];
        y.iter().for_each(|&c| counts[c] += 1);
        base += *counts.iter().max().unwrap() as f64 / y.len() as f64;
    }
    let (acc, base) = (acc / tasks as f64, base / tasks as f64);
    let (first, last) = (log.heldout.first().context("held-out log")?, log.heldout.last().context("held-out log")?);
    let pass = acc - base >= 0.15 && elapsed < Duration::from_secs(15 * 60);
    Ok(Verdict::new(
        pass,
        vec![
            format!("query accuracy {acc:.4}, majority baseline {base:.4}, gap {:.4}", acc - base),
            format!(
                "{} episodes in {:.0}s; held-out loss {:.4} -> {:.4}",
                log.episodes.len(),
                elapsed.as_secs_f64(),
                first.loss,
                last.loss
            ),
        ],
    ))
}

// ------------------------------------------------------------- criterion 6

fn regularization_effect(backbone: &Model) -> Result<Verdict> {
    let data = many_categoricals(200, 1);
    let mut off = Vec::new();
    for lambda in [1.0, 0.0] {
        let cfg = FinetuneConfig { lambda_orth: lambda, seed: 3, ..Default::default() };
        let rep = run_repetition(&data, backbone, &cfg, 3)?;
        let ids = rep.model.identifiers().context("identifiers")?;
        off.push(mean_abs_off_diagonal(&identifier_gram_matrix(&ids)));
    }
    let ratio = off[1] / off[0];
    Ok(Verdict::new(
        ratio >= 2.0,
        vec![format!("mean |off-diagonal|: lambda=1 {:.4}, lambda=0 {:.4}, ratio {ratio:.1}", off[0], off[1])],
    ))
}

// ------------------------------------------------------------- criterion 7

fn identifier_effect(backbone: &Model) -> Result<Verdict> {
    let data = shared_strings(200, 2);
    let mut means = Vec::new();
    let mut details = Vec::new();
    for v in [Variant::Full, Variant::NoIdentifiers] {
        let cfg = FinetuneConfig { variant: v, seed: 0, ..Default::default() };
        let (report, _) = run_protocol("shared_strings", &data, backbone, &cfg, DEFAULT_REPETITIONS)?;
        let per_seed: Vec<String> =
            report.seeds.iter().map(|s| s.test_auc.map_or("undefined".into(), |a| format!("{a:.4}"))).collect();
        let mean = report.mean_auc.context("undefined mean AUC")?;
        details.push(format!("{}: mean AUC {mean:.4}, per seed [{}]", v.as_str(), per_seed.join(", ")));
        means.push(mean);
    }
    Ok(Verdict::new(means[0] > means[1], details))
}

// ------------------------------------------------------------- criterion 8

fn mutate_test_rows(data: &RawDataset, test: &[usize]) -> RawDataset {
    let mut out = data.clone();
    for &r in test {
        for cell in &mut out.rows[r] {
            *cell = match cell {
                Cell::Number(v) => Cell::Number(*v * -7.0 + 3.0),
                Cell::Text(_) => Cell::Text("unseen".into()),
                Cell::Missing => Cell::Number(100.0),
            };
        }
        out.targets[r] = (out.targets[r] + 1) % out.classes.len();
    }
    out
}

fn protocol_fidelity(backbone: &Model) -> Result<Verdict> {
    let data = mixed(121, 8);
    let cfg = FinetuneConfig { epochs: 4, seed: 10, ..Default::default() };
    let (report, reps) = run_protocol("mixed", &data, backbone, &cfg, DEFAULT_REPETITIONS)?;
    let mut pass = reps.len() == 5 && report.seeds.len() == 5;
    let mut details = vec![format!("{} repetitions, seeds {:?}", reps.len(), report.seeds.iter().map(|s| s.seed).collect::<Vec<_>>())];
    for (k, rep) in reps.iter().enumerate() {
        let mut all: Vec<usize> = rep.train_indices.iter().chain(&rep.test_indices).copied().collect();
        all.sort_unstable();
        let split_ok = rep.result.seed == cfg.seed + k as u64
            && rep.train_indices.len() == data.len().div_ceil(2)
            && rep.test_indices.len() == data.len() / 2
            && all == (0..data.len()).collect::<Vec<_>>();

        let mutated = mutate_test_rows(&data, &rep.test_indices);
        let again = run_repetition(&mutated, backbone, &cfg, rep.result.seed)?;
        let train_side = |r: &tabtoken_core::protocol::Repetition| {
            r.log.epochs.iter().map(|e| (e.step_loss, e.orthogonal_loss, e.train.clone())).collect::<Vec<_>>()
        };
        let unchanged = again.schema == rep.schema
            && again.stats == rep.stats
            && again.log.selected_epoch == rep.log.selected_epoch
            && train_side(&again) == train_side(rep)
            && again.model == rep.model;
        let visible = again.test != rep.test;
        pass &= split_ok && unchanged && visible;
        details.push(format!(
            "seed {}: {}/{} split ok {split_ok}; after mutating test rows: fit and selection unchanged {unchanged}, test scores changed {visible}",
            rep.result.seed,
            rep.train_indices.len(),
            rep.test_indices.len()
        ));
    }
    Ok(Verdict::new(pass, details))
}

// ------------------------------------------------------------- criterion 9

fn small_schema(n: usize, vocab: &[usize]) -> FeatureSchema {
    let mut cols: Vec<Column> = (0..n).map(|i| Column::numerical(format!("x{i}"))).collect();
    for (j, &k) in vocab.iter().enumerate() {
        cols.push(Column::categorical(format!("c{j}"), (0..k).map(|v| format!("v{v}")).collect()));
    }
    FeatureSchema::new(cols).unwrap()
}

fn random_rows(sc: &FeatureSchema, rows: usize, rng: &mut ChaCha8Rng) -> RowBlock {
    let offsets = sc.offsets();
    let numeric = (0..rows * sc.n()).map(|_| rng.random_range(-2.0..2.0)).collect();
    let mut categorical = Vec::new();
    for _ in 0..rows {
        for (j, col) in sc.categorical().enumerate() {
            let v = rng.random_range(0..=col.vocabulary.len());
            categorical.push(if v == 0 { NAN_ROW } else { offsets[j] + v - 1 });
        }
    }
    RowBlock::new(sc.n(), sc.m(), numeric, categorical).unwrap()
}

fn embed(model: &Model, x: &RowBlock) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let e = model.embed_rows(&mut g, x)?;
    Ok(g.value(e).to_vec())
}

fn invariance_suite() -> Result<Verdict> {
    let cfg = ModelConfig { d_model: 16, layers: 2, heads: 4, ff_dim: 32, max_classes: 3, max_numerical: 4 };
    let mut rng = ChaCha8Rng::seed_from_u64(90);

    let mut support_worst: f64 = 0.0;
    for trial in 0..20 {
        let sc = small_schema(rng.random_range(0..=3), &[3, 2, 4][..rng.random_range(1..=3)]);
        let mut model = Model::new(cfg.clone(), &mut rng)?;
        model.attach_categorical(&sc, true, &mut rng)?;
        let s = 4 + trial % 6;
        let batch = SupportQueryBatch {
            support_x: random_rows(&sc, s, &mut rng),
            support_y: (0..s).map(|_| rng.random_range(0..3)).collect(),
            query_x: random_rows(&sc, 5, &mut rng),
            query_y: None,
            n_classes: 3,
        };
        let base = model.predict_logits(&batch)?;
        let mut perm: Vec<usize> = (0..s).collect();
        perm.shuffle(&mut rng);
        let permuted = SupportQueryBatch {
            support_x: batch.support_x.select(&perm),
            support_y: perm.iter().map(|&i| batch.support_y[i]).collect(),
            ..batch.clone()
        };
        let got = model.predict_logits(&permuted)?;
        support_worst = base.data.iter().zip(&got.data).map(|(a, b)| (a - b).abs()).fold(support_worst, f64::max);
    }

    // reorder columns, carrying W_num rows, table blocks and identifiers
    let mut equivariant = true;
    for _ in 0..20 {
        let n = rng.random_range(0..=4);
        let vocab: Vec<usize> = (0..rng.random_range(1..=4)).map(|_| rng.random_range(1..5)).collect();
        let sc = small_schema(n, &vocab);
        let mut model = Model::new(cfg.clone(), &mut rng)?;
        model.attach_categorical(&sc, true, &mut rng)?;
        let x = random_rows(&sc, 6, &mut rng);
        let mut np: Vec<usize> = (0..n).collect();
        np.shuffle(&mut rng);
        let mut cp: Vec<usize> = (0..vocab.len()).collect();
        cp.shuffle(&mut rng);

        let new_vocab: Vec<usize> = cp.iter().map(|&j| vocab[j]).collect();
        let new_sc = small_schema(n, &new_vocab);
        let (old_off, new_off) = (sc.offsets(), new_sc.offsets());
        let mut pm = model.clone();
        let w_num = model.store.get(W_NUM)?.clone();
        let w_cat = model.store.get(W_CAT)?.clone();
        let ids = model.store.get(IDS)?.clone();
        let mut remap = vec![NAN_ROW; w_cat.rows()];
        {
            let t = pm.store.get_mut(W_NUM)?;
            for (k, &i) in np.iter().enumerate() {
                t.row_mut(k).copy_from_slice(w_num.row(i));
            }
        }
        {
            let t = pm.store.get_mut(W_CAT)?;
            for (k, &j) in cp.iter().enumerate() {
                for p in 0..vocab[j] {
                    remap[old_off[j] + p] = new_off[k] + p;
                    t.row_mut(new_off[k] + p).copy_from_slice(w_cat.row(old_off[j] + p));
                }
            }
        }
        {
            let t = pm.store.get_mut(IDS)?;
            for (k, &j) in cp.iter().enumerate() {
                t.row_mut(k).copy_from_slice(ids.row(j));
            }
        }
        pm.schema = Some(new_sc);
        let mut numeric = Vec::new();
        let mut categorical = Vec::new();
        for r in 0..x.rows {
            numeric.extend(np.iter().map(|&i| x.numeric_row(r)[i]));
            categorical.extend(cp.iter().map(|&j| remap[x.categorical_row(r)[j]]));
        }
        let px = RowBlock::new(x.n, x.m, numeric, categorical)?;
        let (a, b) = (embed(&model, &x)?, embed(&pm, &px)?);
        equivariant &= a.iter().map(|v| v.to_bits()).eq(b.iter().map(|v| v.to_bits()));
    }

    let mut nan_exact = true;
    for m in 1..=8 {
        let sc = small_schema(2, &vec![3; m]);
        let mut model = Model::new(cfg.clone(), &mut rng)?;
        model.attach_categorical(&sc, true, &mut rng)?;
        let x = RowBlock::new(2, m, vec![0.0; 2], vec![NAN_ROW; m])?;
        let ids = model.store.get(IDS)?;
        let want: Vec<f64> = (0..ids.cols()).map(|c| exact_sum((0..m).map(|j| ids.row(j)[c]))).collect();
        let got = embed(&model, &x)?;
        nan_exact &= got.iter().map(|v| v.to_bits()).eq(want.iter().map(|v| v.to_bits()));
    }

    Ok(Verdict::new(
        support_worst <= 1e-10 && equivariant && nan_exact,
        vec![
            format!("support permutation: max |delta logit| {support_worst:.2e} over 20 episodes"),
            format!("feature permutation equivariance bit-exact over 20 models: {equivariant}"),
            format!("missing row equals identifier sum bit-exact for m = 1..8: {nan_exact}"),
        ],
    ))
}

// ------------------------------------------------------------ criterion 10

fn dir_bytes(dir: &Path) -> Result<BTreeMap<String, Vec<u8>>> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir)? {
        let entry = entry?;
        let name = entry.file_name().to_string_lossy().into_owned();
        // config.toml records the output directory itself
        if name != "config.toml" {
            out.insert(name, std::fs::read(entry.path())?);
        }
    }
    Ok(out)
}

fn determinism() -> Result<Verdict> {
    let root = tempfile::tempdir()?;
    let descriptor = write_dataset(root.path(), "shared", &shared_strings(80, 5))?;
    let mut runs = Vec::new();
    for k in 0..2 {
        let pre = cmd_pretrain::PretrainRun {
            out: root.path().join(format!("pre{k}")),
            seed: 7,
            d_model: 16,
            layers: 1,
            heads: 2,
            ff_dim: 32,
            episodes: 40,
            eval_every: 20,
            heldout_episodes: 4,
            ..Default::default()
        };
        cmd_pretrain::run(&pre)?;
        let ft = cmd_finetune::FinetuneRun {
            out: root.path().join(format!("ft{k}")),
            checkpoint: pre.out.join("checkpoint.json"),
            dataset: descriptor.clone(),
            repetitions: 2,
            variant: "all".into(),
            epochs: 3,
            steps_per_epoch: 2,
            ..Default::default()
        };
        cmd_finetune::run(&ft)?;
        runs.push((dir_bytes(&pre.out)?, dir_bytes(&ft.out)?));
    }
    let pre_same = runs[0].0 == runs[1].0;
    let ft_same = runs[0].1 == runs[1].1;
    ensure!(runs[0].0.contains_key("checkpoint.json"), "pretrain wrote no checkpoint");
    Ok(Verdict::new(
        pre_same && ft_same,
        vec![
            format!("pretrain outputs byte-identical: {pre_same} ({} files)", runs[0].0.len()),
            format!("finetune outputs byte-identical: {ft_same} ({} files)", runs[0].1.len()),
        ],
    ))
}

// ------------------------------------------------------------------ driver

fn main() -> ExitCode {
    let mut failed = 0;
    let mut report = |id: usize, name: &str, v: Result<Verdict>| {
        let v = v.unwrap_or_else(|e| Verdict::new(false, vec![format!("error: {e:#}")]));
        println!("{} [{id}] {name}", if v.pass { "PASS" } else { "FAIL" });
        for d in &v.details {
            println!("      {d}");
        }
        failed += usize::from(!v.pass);
    };

    // backbone shared by criteria 4-8, trained with the CLI defaults
    let pre_dir = tempfile::tempdir().expect("tempdir");
    let start = Instant::now();
    let pretrained = cmd_pretrain::run(&cmd_pretrain::PretrainRun { out: pre_dir.path().to_path_buf(), ..Default::default() });
    let pretrain_time = start.elapsed();

    report(1, "gradient correctness", gradient_correctness());
    report(2, "orthogonal loss oracle", orthogonal_oracle());
    report(3, "ROC AUC OVO oracle", auc_oracle());
    match &pretrained {
        Ok((backbone, log)) => {
            report(4, "freeze contracts", freeze_contracts(backbone));
            report(5, "in-context learning", in_context_learning(backbone, log, pretrain_time));
            report(6, "regularization effect", regularization_effect(backbone));
            report(7, "identifier effect", identifier_effect(backbone));
            report(8, "protocol fidelity", protocol_fidelity(backbone));
        }
        Err(e) => {
            for (id, name) in [(4, "freeze contracts"), (5, "in-context learning"), (6, "regularization effect"), (7, "identifier effect"), (8, "protocol fidelity")] {
                report(id, name, Err(anyhow::anyhow!("pretraining failed: {e:#}")));
            }
        }
    }
    report(9, "invariance suite", invariance_suite());
    report(10, "determinism", determinism());

    if failed == 0 {
        println!("acceptance: all criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: {failed} criteria failed");
        ExitCode::FAILURE
    }
}
