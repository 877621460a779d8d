//! Fixtures shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tabtoken_core::tokenize::NAN_ROW;
use tabtoken_core::{Column, FeatureSchema, Model, ModelConfig, RowBlock, SupportQueryBatch};

pub fn schema(n: usize, vocab: &[usize]) -> FeatureSchema {
    let mut cols: Vec<Column> = (0..n).map(|i| Column::numerical(format!("x{i}"))).collect();
    for (j, &k) in vocab.iter().enumerate() {
        cols.push(Column::categorical(format!("c{j}"), (0..k).map(|v| format!("v{v}")).collect()));
    }
    FeatureSchema::new(cols).expect("valid schema")
}

pub fn rows(sc: &FeatureSchema, count: usize, rng: &mut ChaCha8Rng) -> RowBlock {
    let offsets = sc.offsets();
    let numeric = (0..count * sc.n()).map(|_| rng.random_range(-2.0..2.0)).collect();
    let mut categorical = Vec::with_capacity(count * sc.m());
    for _ in 0..count {
        for (j, col) in sc.categorical().enumerate() {
            let v = rng.random_range(0..=col.vocabulary.len());
            categorical.push(if v == 0 { NAN_ROW } else { offsets[j] + v - 1 });
        }
    }
    RowBlock::new(sc.n(), sc.m(), numeric, categorical).expect("consistent rows")
}

/// Default-size model with a categorical layer for `sc` and one episode.
pub fn model_and_episode(sc: &FeatureSchema, support: usize, query: usize, seed: u64) -> (Model, SupportQueryBatch) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = ModelConfig { max_numerical: sc.n().max(1), ..Default::default() };
    let mut model = Model::new(cfg, &mut rng).expect("valid config");
    model.attach_categorical(sc, true, &mut rng).expect("schema fits");
    let batch = SupportQueryBatch {
        support_x: rows(sc, support, &mut rng),
        support_y: (0..support).map(|_| rng.random_range(0..2)).collect(),
        query_x: rows(sc, query, &mut rng),
        query_y: Some((0..query).map(|_| rng.random_range(0..2)).collect()),
        n_classes: 2,
    };
    (model, batch)
}
