//! The in-context backbone: support rows embed as `tokens(x) + y·W_y`,
//! query rows as `tokens(x)`, a pre-norm transformer encoder mixes them under
//! a support/query attention mask, and a linear head scores the query rows.

use std::rc::Rc;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::NormStats;
use crate::error::{Error, Result};
use crate::graph::{Graph, TokenInputs, Var};
use crate::schema::FeatureSchema;
use crate::tensor::{ParamStore, Tensor};
use crate::tokenize::{CategoricalTokenTable, FeatureIdentifiers, NAN_ROW};

pub const W_NUM: &str = "ft.w_num";
pub const W_CAT: &str = "ft.w_cat";
pub const IDS: &str = "ft.ids";
pub const W_Y: &str = "label.w_y";
pub const HEAD_W: &str = "head.w";
pub const HEAD_B: &str = "head.b";
const FINAL_LN_G: &str = "final_ln.g";
const FINAL_LN_B: &str = "final_ln.b";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub max_classes: usize,
    /// Rows of the numerical weight matrix, i.e. the most numerical columns
    /// a dataset may have.
    pub max_numerical: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { d_model: 64, layers: 3, heads: 4, ff_dim: 128, max_classes: 4, max_numerical: 32 }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::config("heads", format!("d_model {} not divisible by {}", self.d_model, self.heads)));
        }
        if self.layers == 0 {
            return Err(Error::config("layers", "need at least one encoder layer"));
        }
        if self.max_classes < 2 {
            return Err(Error::config("max_classes", "need at least two classes"));
        }
        if self.ff_dim == 0 || self.d_model == 0 {
            return Err(Error::config("d_model", "dimensions must be positive"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }
}

/// Encoded feature rows: row-major numerical values (`rows x n`) and
/// categorical table indices (`rows x m`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RowBlock {
    pub rows: usize,
    pub n: usize,
    pub m: usize,
    pub numeric: Vec<f64>,
    pub categorical: Vec<usize>,
}

impl RowBlock {
    pub fn new(n: usize, m: usize, numeric: Vec<f64>, categorical: Vec<usize>) -> Result<Self> {
        let rows = if n > 0 { numeric.len() / n } else if m > 0 { categorical.len() / m } else { 0 };
        if numeric.len() != rows * n || categorical.len() != rows * m {
            return Err(Error::dim("RowBlock::new", "numeric and categorical blocks disagree on row count"));
        }
        Ok(RowBlock { rows, n, m, numeric, categorical })
    }

    /// A block of `rows` rows with no features at all.
    pub fn featureless(rows: usize) -> Self {
        RowBlock { rows, n: 0, m: 0, numeric: Vec::new(), categorical: Vec::new() }
    }

    pub fn numeric_row(&self, r: usize) -> &[f64] {
        &self.numeric[r * self.n..(r + 1) * self.n]
    }

    pub fn categorical_row(&self, r: usize) -> &[usize] {
        &self.categorical[r * self.m..(r + 1) * self.m]
    }

    pub fn select(&self, indices: &[usize]) -> RowBlock {
        let mut numeric = Vec::with_capacity(indices.len() * self.n);
        let mut categorical = Vec::with_capacity(indices.len() * self.m);
        for &i in indices {
            numeric.extend_from_slice(self.numeric_row(i));
            categorical.extend_from_slice(self.categorical_row(i));
        }
        RowBlock { rows: indices.len(), n: self.n, m: self.m, numeric, categorical }
    }

    pub fn concat(&self, other: &RowBlock) -> Result<RowBlock> {
        if (self.n, self.m) != (other.n, other.m) {
            return Err(Error::Schema(format!(
                "cannot stack rows with ({}, {}) and ({}, {}) features",
                self.n, self.m, other.n, other.m
            )));
        }
        let mut out = self.clone();
        out.rows += other.rows;
        out.numeric.extend_from_slice(&other.numeric);
        out.categorical.extend_from_slice(&other.categorical);
        Ok(out)
    }
}

/// One in-context episode.
#[derive(Clone, Debug, PartialEq)]
pub struct SupportQueryBatch {
    pub support_x: RowBlock,
    pub support_y: Vec<usize>,
    pub query_x: RowBlock,
    pub query_y: Option<Vec<usize>>,
    /// Classes scored by the head; at most `max_classes`.
    pub n_classes: usize,
}

impl SupportQueryBatch {
    /// Shuffles the rows and puts `round(support_fraction · rows)` of them
    /// (at least one, leaving at least one query) in the support set.
    pub fn sample<R: Rng + ?Sized>(
        x: &RowBlock,
        labels: &[usize],
        n_classes: usize,
        support_fraction: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if x.rows < 2 || labels.len() != x.rows {
            return Err(Error::Precondition(format!("episode needs >= 2 labeled rows, got {}", x.rows)));
        }
        let mut idx: Vec<usize> = (0..x.rows).collect();
        idx.shuffle(rng);
        let s = ((support_fraction * x.rows as f64).round() as usize).clamp(1, x.rows - 1);
        let (sup, qry) = idx.split_at(s);
        Ok(SupportQueryBatch {
            support_x: x.select(sup),
            support_y: sup.iter().map(|&i| labels[i]).collect(),
            query_x: x.select(qry),
            query_y: Some(qry.iter().map(|&i| labels[i]).collect()),
            n_classes,
        })
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        if self.support_x.rows == 0 || self.query_x.rows == 0 {
            return Err(Error::Precondition("episode needs at least one support and one query row".into()));
        }
        if self.support_y.len() != self.support_x.rows {
            return Err(Error::dim("SupportQueryBatch", "support labels do not match support rows"));
        }
        if let Some(q) = &self.query_y {
            if q.len() != self.query_x.rows {
                return Err(Error::dim("SupportQueryBatch", "query labels do not match query rows"));
            }
        }
        if self.n_classes < 2 || self.n_classes > config.max_classes {
            return Err(Error::Index(format!("{} classes, model supports 2..={}", self.n_classes, config.max_classes)));
        }
        let labels = self.support_y.iter().chain(self.query_y.iter().flatten());
        if let Some(bad) = labels.into_iter().find(|&&y| y >= self.n_classes) {
            return Err(Error::Index(format!("label {bad} not in [0,{})", self.n_classes)));
        }
        Ok(())
    }
}

/// Attention visibility for `s` supports followed by `q` queries:
/// supports see all supports, each query sees all supports and itself.
/// Row `i` lists what position `i` may attend to.
pub fn build_mask(s: usize, q: usize) -> Vec<Vec<bool>> {
    let t = s + q;
    (0..t)
        .map(|i| (0..t).map(|j| j < s || j == i).collect())
        .collect()
}

fn flat_mask(s: usize, q: usize) -> Rc<[bool]> {
    build_mask(s, q).concat().into()
}

fn layer_name(l: usize, part: &str) -> String {
    format!("enc.{l}.{part}")
}

/// Runs `config.layers` pre-norm encoder layers over `x: [t, d]`.
pub fn encoder_forward(
    g: &mut Graph,
    store: &ParamStore,
    x: Var,
    mask: &Rc<[bool]>,
    config: &ModelConfig,
) -> Result<Var> {
    let (t, d) = g.shape(x);
    if d != config.d_model {
        return Err(Error::dim("encoder_forward", format!("width {d} vs d_model {}", config.d_model)));
    }
    if mask.len() != t * t {
        return Err(Error::dim("encoder_forward", format!("mask of {} for {t} positions", mask.len())));
    }
    let dh = config.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut h = x;
    for l in 0..config.layers {
        let p = |g: &mut Graph, part: &str| g.param(store, &layer_name(l, part));

        let (g1, b1) = (p(g, "ln1.g")?, p(g, "ln1.b")?);
        let a = g.layer_norm(h, g1, b1)?;
        let (wq, bq) = (p(g, "wq")?, p(g, "bq")?);
        let (wk, bk) = (p(g, "wk")?, p(g, "bk")?);
        let (wv, bv) = (p(g, "wv")?, p(g, "bv")?);
        let q = g.linear(a, wq, Some(bq))?;
        let k = g.linear(a, wk, Some(bk))?;
        let v = g.linear(a, wv, Some(bv))?;
        let mut heads = Vec::with_capacity(config.heads);
        for hd in 0..config.heads {
            let qh = g.slice_cols(q, hd * dh, dh)?;
            let kh = g.slice_cols(k, hd * dh, dh)?;
            let vh = g.slice_cols(v, hd * dh, dh)?;
            let scores = g.matmul_t(qh, kh)?;
            let scores = g.scale(scores, scale);
            let attn = g.masked_softmax(scores, mask.clone())?;
            heads.push(g.matmul(attn, vh)?);
        }
        let o = g.concat_cols(&heads)?;
        let (wo, bo) = (p(g, "wo")?, p(g, "bo")?);
        let o = g.linear(o, wo, Some(bo))?;
        h = g.add(h, o)?;

        let (g2, b2) = (p(g, "ln2.g")?, p(g, "ln2.b")?);
        let f = g.layer_norm(h, g2, b2)?;
        let (w1, c1) = (p(g, "w1")?, p(g, "b1")?);
        let f = g.linear(f, w1, Some(c1))?;
        let f = g.gelu(f);
        let (w2, c2) = (p(g, "w2")?, p(g, "b2")?);
        let f = g.linear(f, w2, Some(c2))?;
        h = g.add(h, f)?;

        if g.value(h).iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite activation after encoder layer {l}")));
        }
    }
    Ok(h)
}

/// Which parameters an optimizer may touch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainableSet {
    /// Backbone pretraining: everything except the per-task categorical
    /// table and identifiers. The numerical weights train here.
    Pretrain,
    /// Token table, identifiers and classification head.
    FtLayerOnly,
    /// Everything except the numerical weights.
    FullModel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    /// Schema and normalization the categorical table was built for.
    pub schema: Option<FeatureSchema>,
    pub stats: Option<NormStats>,
}

impl Model {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let ff = config.ff_dim;
        let sd = 1.0 / (d as f64).sqrt();
        let mut store = ParamStore::new();
        store.insert(W_NUM, Tensor::randn(vec![config.max_numerical, d], sd, rng));
        store.insert(W_CAT, Tensor::zeros(vec![1, d]));
        store.set_frozen_rows(W_CAT, vec![NAN_ROW])?;
        store.insert(IDS, Tensor::zeros(vec![0, d]));
        store.insert(W_Y, Tensor::randn(vec![1, d], sd, rng));
        for l in 0..config.layers {
            let mut put = |part: &str, t: Tensor| store.insert(layer_name(l, part), t);
            put("ln1.g", Tensor::new(vec![d], vec![1.0; d])?);
            put("ln1.b", Tensor::zeros(vec![d]));
            for w in ["wq", "wk", "wv", "wo"] {
                put(w, Tensor::randn(vec![d, d], sd, rng));
                put(&format!("b{}", &w[1..]), Tensor::zeros(vec![d]));
            }
            put("ln2.g", Tensor::new(vec![d], vec![1.0; d])?);
            put("ln2.b", Tensor::zeros(vec![d]));
            put("w1", Tensor::randn(vec![d, ff], sd, rng));
            put("b1", Tensor::zeros(vec![ff]));
            put("w2", Tensor::randn(vec![ff, d], 1.0 / (ff as f64).sqrt(), rng));
            put("b2", Tensor::zeros(vec![d]));
        }
        store.insert(FINAL_LN_G, Tensor::new(vec![d], vec![1.0; d])?);
        store.insert(FINAL_LN_B, Tensor::zeros(vec![d]));
        store.insert(HEAD_W, Tensor::randn(vec![d, config.max_classes], sd, rng));
        store.insert(HEAD_B, Tensor::zeros(vec![config.max_classes]));
        Ok(Model { config, store, schema: None, stats: None })
    }

    /// Installs a fresh token table (and identifiers, unless disabled) for
    /// `schema`. New tensors start frozen; call [`Model::set_trainable`]
    /// afterwards.
    pub fn attach_categorical<R: Rng + ?Sized>(
        &mut self,
        schema: &FeatureSchema,
        use_identifiers: bool,
        rng: &mut R,
    ) -> Result<()> {
        if schema.n() > self.config.max_numerical {
            return Err(Error::Schema(format!(
                "{} numerical columns exceed the model's {}",
                schema.n(),
                self.config.max_numerical
            )));
        }
        let d = self.config.d_model;
        let table = CategoricalTokenTable::init(schema, d, rng);
        *self.store.get_mut(W_CAT)? = table.weights;
        self.store.set_frozen_rows(W_CAT, vec![NAN_ROW])?;
        if use_identifiers {
            let ids = FeatureIdentifiers::init(schema.m(), d, rng);
            self.store.insert(IDS, ids.0);
        } else {
            self.store.remove(IDS);
        }
        self.schema = Some(schema.clone());
        Ok(())
    }

    pub fn has_identifiers(&self) -> bool {
        self.store.contains(IDS)
    }

    pub fn identifiers(&self) -> Option<FeatureIdentifiers> {
        self.store.get(IDS).ok().map(|t| FeatureIdentifiers(t.clone()))
    }

    pub fn token_table(&self) -> Result<CategoricalTokenTable> {
        let offsets = self.schema.as_ref().map(FeatureSchema::offsets).unwrap_or_default();
        Ok(CategoricalTokenTable { weights: self.store.get(W_CAT)?.clone(), offsets })
    }

    pub fn set_trainable(&mut self, set: TrainableSet) {
        self.store.set_trainable(|name| match set {
            TrainableSet::Pretrain => name != W_CAT && name != IDS,
            TrainableSet::FtLayerOnly => matches!(name, W_CAT | IDS | HEAD_W | HEAD_B),
            TrainableSet::FullModel => name != W_NUM,
        });
    }

    /// Sample embeddings `[rows, d]` of a block, before label embedding.
    pub fn embed_rows(&self, g: &mut Graph, x: &RowBlock) -> Result<Var> {
        let w_num = g.param(&self.store, W_NUM)?;
        let w_cat = g.param(&self.store, W_CAT)?;
        let ids = if self.has_identifiers() { Some(g.param(&self.store, IDS)?) } else { None };
        let inputs = TokenInputs {
            rows: x.rows,
            numeric: x.numeric.as_slice().into(),
            n: x.n,
            categorical: x.categorical.as_slice().into(),
            m: x.m,
        };
        g.tokens(w_num, w_cat, ids, inputs)
    }

    /// Query-row embedding: the sum of the row's feature tokens.
    pub fn embed_query(&self, x: &RowBlock, row: usize) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let e = self.embed_rows(&mut g, &x.select(&[row]))?;
        Ok(g.value(e).to_vec())
    }

    /// Support-row embedding: the query embedding plus `y · W_y`.
    pub fn embed_support(&self, x: &RowBlock, row: usize, y: usize) -> Result<Vec<f64>> {
        if y >= self.config.max_classes {
            return Err(Error::Index(format!("label {y} not in [0,{})", self.config.max_classes)));
        }
        let mut g = Graph::new();
        let e = self.embed_rows(&mut g, &x.select(&[row]))?;
        let e = self.add_label_embedding(&mut g, e, &[y], 0)?;
        Ok(g.value(e).to_vec())
    }

    fn add_label_embedding(&self, g: &mut Graph, emb: Var, support_y: &[usize], queries: usize) -> Result<Var> {
        let w_y = g.param(&self.store, W_Y)?;
        let col: Vec<f64> = support_y.iter().map(|&y| y as f64).chain(std::iter::repeat_n(0.0, queries)).collect();
        let col = g.constant(col.len(), 1, col)?;
        let ly = g.matmul(col, w_y)?;
        g.add(emb, ly)
    }

    /// Query logits `[q, n_classes]` from a single forward pass.
    pub fn forward(&self, g: &mut Graph, batch: &SupportQueryBatch) -> Result<Var> {
        batch.validate(&self.config)?;
        let s = batch.support_x.rows;
        let q = batch.query_x.rows;
        let x = batch.support_x.concat(&batch.query_x)?;
        let emb = self.embed_rows(g, &x)?;
        let h = self.add_label_embedding(g, emb, &batch.support_y, q)?;
        let mask = flat_mask(s, q);
        let h = encoder_forward(g, &self.store, h, &mask, &self.config)?;
        let (lg, lb) = (g.param(&self.store, FINAL_LN_G)?, g.param(&self.store, FINAL_LN_B)?);
        let h = g.layer_norm(h, lg, lb)?;
        let hq = g.slice_rows(h, s, q)?;
        let (hw, hb) = (g.param(&self.store, HEAD_W)?, g.param(&self.store, HEAD_B)?);
        let logits = g.linear(hq, hw, Some(hb))?;
        if batch.n_classes < self.config.max_classes {
            g.slice_cols(logits, 0, batch.n_classes)
        } else {
            Ok(logits)
        }
    }

    pub fn predict_logits(&self, batch: &SupportQueryBatch) -> Result<Tensor> {
        let mut g = Graph::new();
        let logits = self.forward(&mut g, batch)?;
        Ok(g.to_tensor(logits))
    }

    /// Row-wise softmax of the query logits.
    pub fn predict_proba(&self, batch: &SupportQueryBatch) -> Result<Tensor> {
        Ok(softmax_rows(&self.predict_logits(batch)?))
    }

    /// [`Model::predict_proba`] evaluated `chunk` queries at a time. Queries
    /// never see each other, so the result is bit-identical to the
    /// single-pass version while bounding attention memory.
    pub fn predict_proba_chunked(&self, batch: &SupportQueryBatch, chunk: usize) -> Result<Tensor> {
        let q = batch.query_x.rows;
        let chunk = chunk.max(1);
        if q <= chunk {
            return self.predict_proba(batch);
        }
        let mut data = Vec::with_capacity(q * batch.n_classes);
        for start in (0..q).step_by(chunk) {
            let idx: Vec<usize> = (start..(start + chunk).min(q)).collect();
            let part = SupportQueryBatch {
                support_x: batch.support_x.clone(),
                support_y: batch.support_y.clone(),
                query_x: batch.query_x.select(&idx),
                query_y: None,
                n_classes: batch.n_classes,
            };
            data.extend(self.predict_proba(&part)?.data);
        }
        Tensor::new(vec![q, batch.n_classes], data)
    }
}

pub fn softmax_rows(logits: &Tensor) -> Tensor {
    let (r, c) = logits.dims2();
    let mut out = logits.clone();
    for i in 0..r {
        let row = &mut out.data[i * c..(i + 1) * c];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_examples() {
        assert_eq!(build_mask(1, 1), vec![vec![true, false], vec![true, true]]);
        let m = build_mask(2, 2);
        assert_eq!(m[0], vec![true, true, false, false]);
        assert_eq!(m[1], vec![true, true, false, false]);
        assert_eq!(m[2], vec![true, true, true, false]);
        assert_eq!(m[3], vec![true, true, false, true]);
        for (s, q) in [(1, 4), (5, 2), (3, 3)] {
            let m = build_mask(s, q);
            assert!((0..s).all(|i| (0..s).all(|j| m[i][j])));
        }
    }

    #[test]
    fn softmax_examples() {
        let t = Tensor::from_rows(&[vec![2f64.ln(), 0.0], vec![0.0, 0.0]]).unwrap();
        let p = softmax_rows(&t);
        assert!((p.data[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((p.data[1] - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(&p.data[2..], &[0.5, 0.5]);
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        let bad = ModelConfig { heads: 3, ..Default::default() };
        assert!(matches!(bad.validate(), Err(Error::Config { .. })));
        let bad = ModelConfig { max_classes: 1, ..Default::default() };
        assert!(bad.validate().is_err());
    }

    use crate::schema::Column;
    use crate::tokenize::{tokenize_categorical_index, tokenize_numerical, NumericalWeightMatrix};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_model() -> Model {
        let cfg = ModelConfig { d_model: 4, layers: 1, heads: 2, ff_dim: 8, max_classes: 3, max_numerical: 2 };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut m = Model::new(cfg, &mut rng).unwrap();
        let schema = FeatureSchema::new(vec![
            Column::numerical("x"),
            Column::categorical("c", vec!["a".into(), "b".into()]),
        ])
        .unwrap();
        m.attach_categorical(&schema, true, &mut rng).unwrap();
        m
    }

    #[test]
    fn embed_examples() {
        let m = small_model();
        let ids = m.identifiers().unwrap();
        // zero numerical value, no categorical columns
        let zero = RowBlock::new(1, 0, vec![0.0], vec![]).unwrap();
        let mut featureless_cat = m.clone();
        featureless_cat.store.remove(IDS);
        assert!(featureless_cat.embed_query(&zero, 0).unwrap().iter().all(|&v| v == 0.0));
        // a lone missing categorical value
        let nan = RowBlock::new(0, 1, vec![], vec![NAN_ROW]).unwrap();
        assert_eq!(m.embed_query(&nan, 0).unwrap(), ids.0.row(0));
        // mixed row: compose the single-feature tokens
        let mixed = RowBlock::new(1, 1, vec![1.5], vec![2]).unwrap();
        let w = NumericalWeightMatrix(m.store.get(W_NUM).unwrap().clone());
        let table = m.token_table().unwrap();
        let t_num = tokenize_numerical(1.5, 0, &w).unwrap();
        let t_cat = tokenize_categorical_index(2, 0, &table, Some(&ids)).unwrap();
        let expected: Vec<f64> = t_num.iter().zip(&t_cat).map(|(a, b)| a + b).collect();
        assert_eq!(m.embed_query(&mixed, 0).unwrap(), expected);
    }

    #[test]
    fn support_embedding_adds_scaled_label_row() {
        let m = small_model();
        let w_y = m.store.get(W_Y).unwrap().data.clone();
        let x = RowBlock::new(1, 1, vec![0.7], vec![1]).unwrap();
        let q = m.embed_query(&x, 0).unwrap();
        assert_eq!(m.embed_support(&x, 0, 0).unwrap(), q);
        let expected: Vec<f64> = q.iter().zip(&w_y).map(|(a, b)| a + 2.0 * b).collect();
        assert_eq!(m.embed_support(&x, 0, 2).unwrap(), expected);
        let mut plain = m.clone();
        plain.store.remove(IDS);
        let zero = RowBlock::new(1, 0, vec![0.0], vec![]).unwrap();
        assert_eq!(plain.embed_support(&zero, 0, 1).unwrap(), w_y);
        assert!(matches!(m.embed_support(&x, 0, 3), Err(Error::Index(_))));
    }

    #[test]
    fn zero_depth_encoder_is_identity() {
        let cfg = ModelConfig { d_model: 2, layers: 0, heads: 1, ff_dim: 2, max_classes: 2, max_numerical: 1 };
        let mut g = Graph::new();
        let x = g.constant(2, 2, vec![1.0, -2.0, 0.5, 3.0]).unwrap();
        let y = encoder_forward(&mut g, &ParamStore::new(), x, &flat_mask(1, 1), &cfg).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn single_head_attention_matches_hand_computation() {
        // one layer, d=2, identity projections, zero feedforward: out = x + attn(LN(x))
        let cfg = ModelConfig { d_model: 2, layers: 1, heads: 1, ff_dim: 2, max_classes: 2, max_numerical: 1 };
        let mut store = ParamStore::new();
        let eye = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let ones = Tensor::new(vec![2], vec![1.0, 1.0]).unwrap();
        for (k, t) in [
            ("ln1.g", ones.clone()),
            ("ln2.g", ones),
            ("wq", eye.clone()),
            ("wk", eye.clone()),
            ("wv", eye.clone()),
            ("wo", eye),
            ("w1", Tensor::zeros(vec![2, 2])),
            ("w2", Tensor::zeros(vec![2, 2])),
        ] {
            store.insert(layer_name(0, k), t);
        }
        for k in ["ln1.b", "ln2.b", "bq", "bk", "bv", "bo", "b1", "b2"] {
            store.insert(layer_name(0, k), Tensor::zeros(vec![2]));
        }
        let x = [[3.0, 1.0], [0.0, 2.0]];
        let mut g = Graph::new();
        let xv = g.constant(2, 2, x.concat()).unwrap();
        let y = encoder_forward(&mut g, &store, xv, &flat_mask(1, 1), &cfg).unwrap();

        let ln = |r: [f64; 2]| {
            let mu = (r[0] + r[1]) / 2.0;
            let var = ((r[0] - mu).powi(2) + (r[1] - mu).powi(2)) / 2.0;
            let s = (var + crate::graph::LAYER_NORM_EPS).sqrt();
            [(r[0] - mu) / s, (r[1] - mu) / s]
        };
        let (a0, a1) = (ln(x[0]), ln(x[1]));
        // token 0 is the support and sees only itself
        let out0 = [x[0][0] + a0[0], x[0][1] + a0[1]];
        // token 1 is a query and sees the support and itself
        let s10 = (a1[0] * a0[0] + a1[1] * a0[1]) / 2f64.sqrt();
        let s11 = (a1[0] * a1[0] + a1[1] * a1[1]) / 2f64.sqrt();
        let p0 = 1.0 / (1.0 + (s11 - s10).exp());
        let p1 = 1.0 - p0;
        let out1 = [x[1][0] + p0 * a0[0] + p1 * a1[0], x[1][1] + p0 * a0[1] + p1 * a1[1]];
        let got = g.value(y);
        for (k, e) in out0.iter().chain(&out1).enumerate() {
            assert!((got[k] - e).abs() < 1e-12, "entry {k}: {} vs {e}", got[k]);
        }
    }

    #[test]
    fn row_block_select_and_concat() {
        let b = RowBlock::new(1, 1, vec![1.0, 2.0, 3.0], vec![4, 5, 6]).unwrap();
        let s = b.select(&[2, 0]);
        assert_eq!(s.numeric, vec![3.0, 1.0]);
        assert_eq!(s.categorical, vec![6, 4]);
        let c = s.concat(&b).unwrap();
        assert_eq!(c.rows, 5);
        assert!(RowBlock::new(2, 0, vec![1.0; 3], vec![]).is_err());
    }
}
