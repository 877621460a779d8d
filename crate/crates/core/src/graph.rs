//! Reverse-mode automatic differentiation over 2-D `f64` matrices.
//!
//! A [`Graph`] records every operation in creation order, which is already a
//! topological order, so `backward` simply walks the node list in reverse.
//! Parameters enter the graph by name through [`Graph::param`]; gradients are
//! later pushed back into the [`ParamStore`] with
//! [`Graph::accumulate_into`], which is where freezing takes effect.

use std::collections::HashMap;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::exact_sum::exact_sum;
use crate::tensor::{ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Inputs of the fused feature-tokenization node.
#[derive(Clone, Debug)]
pub struct TokenInputs {
    pub rows: usize,
    /// Row-major `rows x n` numerical values.
    pub numeric: Rc<[f64]>,
    pub n: usize,
    /// Row-major `rows x m` table row indices.
    pub categorical: Rc<[usize]>,
    pub m: usize,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    MaskedSoftmax { x: Var },
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    SliceRows { x: Var, start: usize },
    Tokens { w_num: Var, w_cat: Var, ids: Option<Var>, inputs: TokenInputs },
    CrossEntropy { logits: Var, labels: Rc<[usize]>, probs: Vec<f64> },
    OrthLoss { ids: Var, unit: Vec<f64>, norms: Vec<f64>, gram: Vec<f64>, eps: f64 },
    WeightedSum { x: Var, weights: Rc<[f64]> },
}

#[derive(Clone, Debug)]
struct Node {
    value: Vec<f64>,
    rows: usize,
    cols: usize,
    op: Op,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    bindings: Vec<(String, Var)>,
    bound: HashMap<String, Var>,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Vec<f64>, rows: usize, cols: usize, op: Op) -> Var {
        debug_assert_eq!(value.len(), rows * cols);
        self.nodes.push(Node { value, rows, cols, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let (r, c) = self.shape(v);
        Tensor::new(vec![r, c], self.value(v).to_vec()).expect("node shape is consistent")
    }

    /// Gradient of the last `backward` target with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn constant(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Result<Var> {
        if data.len() != rows * cols {
            return Err(Error::dim("constant", format!("{rows}x{cols} vs {} values", data.len())));
        }
        Ok(self.push(data, rows, cols, Op::Leaf))
    }

    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let (r, c) = t.dims2();
        self.push(t.data.clone(), r, c, Op::Leaf)
    }

    /// Leaf for a named parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let v = self.leaf(store.get(name)?);
        self.bound.insert(name.to_owned(), v);
        self.bindings.push((name.to_owned(), v));
        Ok(v)
    }

    pub fn bindings(&self) -> &[(String, Var)] {
        &self.bindings
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.shape(a);
        let (k2, m) = self.shape(b);
        if k != k2 {
            return Err(Error::dim("matmul", format!("[{n},{k}] x [{k2},{m}]")));
        }
        let out = matmul_nn(self.value(a), self.value(b), n, k, m);
        Ok(self.push(out, n, m, Op::MatMul(a, b)))
    }

    /// `a · bᵀ` for `a: [n,k]`, `b: [m,k]`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.shape(a);
        let (m, k2) = self.shape(b);
        if k != k2 {
            return Err(Error::dim("matmul_t", format!("[{n},{k}] x [{m},{k2}]ᵀ")));
        }
        let out = matmul_nt(self.value(a), self.value(b), n, k, m);
        Ok(self.push(out, n, m, Op::MatMulT(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim("add", format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let (r, c) = self.shape(a);
        Ok(self.push(out, r, c, Op::Add(a, b)))
    }

    /// Adds a `[1, c]` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        if self.shape(row) != (1, c) {
            return Err(Error::dim("add_row", format!("[{r},{c}] + {:?}", self.shape(row))));
        }
        let b = self.value(row);
        let out = self.value(a).chunks(c.max(1)).flat_map(|ra| ra.iter().zip(b).map(|(x, y)| x + y)).collect();
        Ok(self.push(out, r, c, Op::AddRow(a, row)))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).iter().map(|x| x * s).collect();
        let (r, c) = self.shape(a);
        self.push(out, r, c, Op::Scale(a, s))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| gelu(x).0).collect();
        let (r, c) = self.shape(a);
        self.push(out, r, c, Op::Gelu(a))
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` of shape `[1, c]`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (r, c) = self.shape(x);
        if self.shape(gamma) != (1, c) || self.shape(beta) != (1, c) {
            return Err(Error::dim("layer_norm", format!("input width {c}")));
        }
        let xs = self.value(x);
        let g = self.value(gamma);
        let b = self.value(beta);
        let mut out = vec![0.0; r * c];
        let mut xhat = vec![0.0; r * c];
        let mut rstd = vec![0.0; r];
        for i in 0..r {
            let row = &xs[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[i] = rs;
            for k in 0..c {
                let h = (row[k] - mean) * rs;
                xhat[i * c + k] = h;
                out[i * c + k] = h * g[k] + b[k];
            }
        }
        Ok(self.push(out, r, c, Op::LayerNorm { x, gamma, beta, xhat, rstd }))
    }

    /// Row-wise softmax over entries where `mask` is true; masked entries are 0.
    pub fn masked_softmax(&mut self, x: Var, mask: Rc<[bool]>) -> Result<Var> {
        let (r, c) = self.shape(x);
        if mask.len() != r * c {
            return Err(Error::dim("masked_softmax", format!("mask {} vs [{r},{c}]", mask.len())));
        }
        let xs = self.value(x);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &xs[i * c..(i + 1) * c];
            let m = &mask[i * c..(i + 1) * c];
            let max = row
                .iter()
                .zip(m)
                .filter(|(_, &keep)| keep)
                .map(|(v, _)| *v)
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(Error::Precondition(format!("attention row {i} has no visible position")));
            }
            let mut z = 0.0;
            for k in 0..c {
                if m[k] {
                    let e = (row[k] - max).exp();
                    out[i * c + k] = e;
                    z += e;
                }
            }
            for v in &mut out[i * c..(i + 1) * c] {
                *v /= z;
            }
        }
        Ok(self.push(out, r, c, Op::MaskedSoftmax { x }))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.shape(x);
        if start + len > c {
            return Err(Error::dim("slice_cols", format!("{start}+{len} > {c}")));
        }
        let xs = self.value(x);
        let out = (0..r).flat_map(|i| xs[i * c + start..i * c + start + len].iter().copied()).collect();
        Ok(self.push(out, r, len, Op::SliceCols { x, start }))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = parts.first().map(|&p| self.shape(p).0).unwrap_or(0);
        if parts.iter().any(|&p| self.shape(p).0 != r) {
            return Err(Error::dim("concat_cols", "row counts differ"));
        }
        let c: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for &p in parts {
                let pc = self.shape(p).1;
                out.extend_from_slice(&self.value(p)[i * pc..(i + 1) * pc]);
            }
        }
        Ok(self.push(out, r, c, Op::ConcatCols(parts.to_vec())))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.shape(x);
        if start + len > r {
            return Err(Error::dim("slice_rows", format!("{start}+{len} > {r}")));
        }
        let out = self.value(x)[start * c..(start + len) * c].to_vec();
        Ok(self.push(out, len, c, Op::SliceRows { x, start }))
    }

    /// Fused feature tokenization: for each row, the correctly rounded sum of
    /// `x_i · W_num[i]` over numerical columns and `W_cat[g_j] + I[j]` over
    /// categorical columns.
    pub fn tokens(&mut self, w_num: Var, w_cat: Var, ids: Option<Var>, inputs: TokenInputs) -> Result<Var> {
        let (rn, d) = self.shape(w_num);
        let (rc, dc) = self.shape(w_cat);
        if dc != d {
            return Err(Error::dim("tokens", format!("W_num width {d} vs W_cat width {dc}")));
        }
        if inputs.n > rn {
            return Err(Error::Schema(format!("{} numerical columns but W_num has {rn} rows", inputs.n)));
        }
        if inputs.numeric.len() != inputs.rows * inputs.n || inputs.categorical.len() != inputs.rows * inputs.m {
            return Err(Error::dim("tokens", "input blocks do not match row count"));
        }
        if let Some(ids) = ids {
            let (mi, di) = self.shape(ids);
            if mi != inputs.m || di != d {
                return Err(Error::Schema(format!(
                    "{} categorical columns but identifiers are [{mi},{di}]",
                    inputs.m
                )));
            }
        }
        if let Some(&bad) = inputs.categorical.iter().find(|&&c| c >= rc) {
            return Err(Error::Index(format!("category row {bad} outside table of {rc} rows")));
        }
        let wn = self.value(w_num);
        let wc = self.value(w_cat);
        let id_vals = ids.map(|v| self.value(v));
        let (n, m) = (inputs.n, inputs.m);
        let mut out = vec![0.0; inputs.rows * d];
        let mut terms = Vec::with_capacity(n + m);
        for r in 0..inputs.rows {
            let xr = &inputs.numeric[r * n..(r + 1) * n];
            let cr = &inputs.categorical[r * m..(r + 1) * m];
            for k in 0..d {
                terms.clear();
                terms.extend(xr.iter().enumerate().map(|(i, &x)| x * wn[i * d + k]));
                terms.extend(cr.iter().enumerate().map(|(j, &c)| match id_vals {
                    Some(iv) => wc[c * d + k] + iv[j * d + k],
                    None => wc[c * d + k],
                }));
                out[r * d + k] = exact_sum(terms.iter().copied());
            }
        }
        Ok(self.push(out, inputs.rows, d, Op::Tokens { w_num, w_cat, ids, inputs }))
    }

    /// Mean softmax cross-entropy of `logits: [q, C]` against class indices.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (q, c) = self.shape(logits);
        if labels.len() != q {
            return Err(Error::dim("cross_entropy", format!("{} labels for {q} rows", labels.len())));
        }
        if q == 0 {
            return Err(Error::Precondition("cross_entropy over zero rows".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::Index(format!("label {bad} not in [0,{c})")));
        }
        let (loss, probs) = softmax_cross_entropy_value(self.value(logits), labels, c);
        Ok(self.push(vec![loss], 1, 1, Op::CrossEntropy { logits, labels: labels.into(), probs }))
    }

    /// Sum of squared off-diagonal cosine similarities between rows of `ids`.
    pub fn orthogonal_loss(&mut self, ids: Var, eps: f64) -> Var {
        let (m, d) = self.shape(ids);
        let v = self.value(ids);
        let (unit, norms) = normalize_rows(v, m, d, eps);
        let gram = matmul_nt(&unit, &unit, m, d, m);
        let mut loss = 0.0;
        for i in 0..m {
            for j in 0..m {
                if i != j {
                    loss += gram[i * m + j] * gram[i * m + j];
                }
            }
        }
        self.push(vec![loss], 1, 1, Op::OrthLoss { ids, unit, norms, gram, eps })
    }

    /// `Σ x ⊙ weights`, used to reduce tensors to scalars in checks.
    pub fn weighted_sum(&mut self, x: Var, weights: Rc<[f64]>) -> Result<Var> {
        let xs = self.value(x);
        if xs.len() != weights.len() {
            return Err(Error::dim("weighted_sum", format!("{} vs {}", xs.len(), weights.len())));
        }
        let s = xs.iter().zip(weights.iter()).map(|(a, b)| a * b).sum();
        Ok(self.push(vec![s], 1, 1, Op::WeightedSum { x, weights }))
    }

    /// Reverse pass from the scalar `root`. Gradients of every node are kept
    /// until the next call.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.shape(root) != (1, 1) {
            return Err(Error::dim("backward", "root must be a scalar"));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    /// Pushes parameter gradients into the store. Frozen tensors and frozen
    /// rows receive nothing.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for (name, var) in &self.bindings {
            let Some(g) = self.grad(*var) else { continue };
            let Some(p) = store.param_mut(name) else { continue };
            if !p.tensor.requires_grad {
                continue;
            }
            if p.frozen_rows.is_empty() {
                p.tensor.accumulate_grad(g);
            } else {
                let cols = p.tensor.cols();
                let mut masked = g.to_vec();
                for &r in &p.frozen_rows {
                    if r * cols < masked.len() {
                        masked[r * cols..(r + 1) * cols].fill(0.0);
                    }
                }
                p.tensor.accumulate_grad(&masked);
            }
        }
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let (rows, cols) = (node.rows, node.cols);
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (n, k) = self.shape(*a);
                let m = cols;
                let da = matmul_nt(g, self.value(*b), n, m, k);
                let db = matmul_tn(self.value(*a), g, n, k, m);
                add_into(grads, *a, &da);
                add_into(grads, *b, &db);
            }
            Op::MatMulT(a, b) => {
                // c = a bᵀ, a: [n,k], b: [m,k]
                let (n, k) = self.shape(*a);
                let m = cols;
                let da = matmul_nn(g, self.value(*b), n, m, k);
                let db = matmul_tn(g, self.value(*a), n, m, k);
                add_into(grads, *a, &da);
                add_into(grads, *b, &db);
            }
            Op::Add(a, b) => {
                add_into(grads, *a, g);
                add_into(grads, *b, g);
            }
            Op::AddRow(a, row) => {
                add_into(grads, *a, g);
                let mut db = vec![0.0; cols];
                for r in g.chunks(cols.max(1)) {
                    for (d, v) in db.iter_mut().zip(r) {
                        *d += v;
                    }
                }
                add_into(grads, *row, &db);
            }
            Op::Scale(a, s) => {
                let d: Vec<f64> = g.iter().map(|v| v * s).collect();
                add_into(grads, *a, &d);
            }
            Op::Gelu(a) => {
                let d: Vec<f64> = self.value(*a).iter().zip(g).map(|(&x, gv)| gelu(x).1 * gv).collect();
                add_into(grads, *a, &d);
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let gm = self.value(*gamma);
                let mut dx = vec![0.0; rows * cols];
                let mut dg = vec![0.0; cols];
                let mut db = vec![0.0; cols];
                for r in 0..rows {
                    let gr = &g[r * cols..(r + 1) * cols];
                    let hr = &xhat[r * cols..(r + 1) * cols];
                    let mut mean_dh = 0.0;
                    let mut mean_dh_h = 0.0;
                    for k in 0..cols {
                        let dh = gr[k] * gm[k];
                        mean_dh += dh;
                        mean_dh_h += dh * hr[k];
                        dg[k] += gr[k] * hr[k];
                        db[k] += gr[k];
                    }
                    mean_dh /= cols as f64;
                    mean_dh_h /= cols as f64;
                    for k in 0..cols {
                        let dh = gr[k] * gm[k];
                        dx[r * cols + k] = rstd[r] * (dh - mean_dh - hr[k] * mean_dh_h);
                    }
                }
                add_into(grads, *x, &dx);
                add_into(grads, *gamma, &dg);
                add_into(grads, *beta, &db);
            }
            Op::MaskedSoftmax { x } => {
                let p = &node.value;
                let mut dx = vec![0.0; rows * cols];
                for r in 0..rows {
                    let pr = &p[r * cols..(r + 1) * cols];
                    let gr = &g[r * cols..(r + 1) * cols];
                    let dot: f64 = pr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for k in 0..cols {
                        dx[r * cols + k] = pr[k] * (gr[k] - dot);
                    }
                }
                add_into(grads, *x, &dx);
            }
            Op::SliceCols { x, start } => {
                let (r, c) = self.shape(*x);
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    dx[i * c + start..i * c + start + cols].copy_from_slice(&g[i * cols..(i + 1) * cols]);
                }
                add_into(grads, *x, &dx);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let pc = self.shape(p).1;
                    let mut dp = Vec::with_capacity(rows * pc);
                    for r in 0..rows {
                        dp.extend_from_slice(&g[r * cols + offset..r * cols + offset + pc]);
                    }
                    add_into(grads, p, &dp);
                    offset += pc;
                }
            }
            Op::SliceRows { x, start } => {
                let (r, c) = self.shape(*x);
                let mut dx = vec![0.0; r * c];
                dx[start * c..(start + rows) * c].copy_from_slice(g);
                add_into(grads, *x, &dx);
            }
            Op::Tokens { w_num, w_cat, ids, inputs } => {
                let d = cols;
                let (n, m) = (inputs.n, inputs.m);
                let (rn, _) = self.shape(*w_num);
                let (rc, _) = self.shape(*w_cat);
                let mut dn = vec![0.0; rn * d];
                let mut dc = vec![0.0; rc * d];
                let mut di = vec![0.0; m * d];
                for r in 0..rows {
                    let gr = &g[r * d..(r + 1) * d];
                    for i in 0..n {
                        let x = inputs.numeric[r * n + i];
                        for k in 0..d {
                            dn[i * d + k] += x * gr[k];
                        }
                    }
                    for j in 0..m {
                        let c = inputs.categorical[r * m + j];
                        for k in 0..d {
                            dc[c * d + k] += gr[k];
                            di[j * d + k] += gr[k];
                        }
                    }
                }
                add_into(grads, *w_num, &dn);
                add_into(grads, *w_cat, &dc);
                if let Some(ids) = ids {
                    add_into(grads, *ids, &di);
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let (q, c) = self.shape(*logits);
                let scale = g[0] / q as f64;
                let mut dl = probs.clone();
                for (r, &y) in labels.iter().enumerate() {
                    dl[r * c + y] -= 1.0;
                }
                for v in &mut dl {
                    *v *= scale;
                }
                add_into(grads, *logits, &dl);
            }
            Op::OrthLoss { ids, unit, norms, gram, eps } => {
                let (m, d) = self.shape(*ids);
                let v = self.value(*ids);
                let mut dv = vec![0.0; m * d];
                for i in 0..m {
                    let mut du = vec![0.0; d];
                    for j in 0..m {
                        if i != j {
                            let coef = 4.0 * gram[i * m + j] * g[0];
                            for k in 0..d {
                                du[k] += coef * unit[j * d + k];
                            }
                        }
                    }
                    let r = norms[i];
                    let denom = r.max(*eps);
                    let vi = &v[i * d..(i + 1) * d];
                    let proj = if r > *eps {
                        vi.iter().zip(&du).map(|(a, b)| a * b).sum::<f64>() / (r * r * r)
                    } else {
                        0.0
                    };
                    for k in 0..d {
                        dv[i * d + k] = du[k] / denom - vi[k] * proj;
                    }
                }
                add_into(grads, *ids, &dv);
            }
            Op::WeightedSum { x, weights } => {
                let d: Vec<f64> = weights.iter().map(|w| w * g[0]).collect();
                add_into(grads, *x, &d);
            }
        }
    }
}

fn add_into(grads: &mut [Option<Vec<f64>>], v: Var, delta: &[f64]) {
    match &mut grads[v.0] {
        Some(buf) => {
            for (b, d) in buf.iter_mut().zip(delta) {
                *b += d;
            }
        }
        slot @ None => *slot = Some(delta.to_vec()),
    }
}

/// `[n,k] x [k,m]`
pub(crate) fn matmul_nn(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut c = vec![0.0; n * m];
    for i in 0..n {
        let ci = &mut c[i * m..(i + 1) * m];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let bp = &b[p * m..(p + 1) * m];
            for (cv, bv) in ci.iter_mut().zip(bp) {
                *cv += aip * bv;
            }
        }
    }
    c
}

/// `[n,k] x [m,k]ᵀ`
pub(crate) fn matmul_nt(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut c = vec![0.0; n * m];
    for i in 0..n {
        let ai = &a[i * k..(i + 1) * k];
        for j in 0..m {
            let bj = &b[j * k..(j + 1) * k];
            c[i * m + j] = ai.iter().zip(bj).map(|(x, y)| x * y).sum();
        }
    }
    c
}

/// `[n,k]ᵀ x [n,m]`
pub(crate) fn matmul_tn(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut c = vec![0.0; k * m];
    for i in 0..n {
        let bi = &b[i * m..(i + 1) * m];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let cp = &mut c[p * m..(p + 1) * m];
            for (cv, bv) in cp.iter_mut().zip(bi) {
                *cv += aip * bv;
            }
        }
    }
    c
}

/// Unit-normalized rows and the raw norms. Norms below `eps` are replaced
/// by `eps`, so zero rows stay finite.
pub(crate) fn normalize_rows(v: &[f64], m: usize, d: usize, eps: f64) -> (Vec<f64>, Vec<f64>) {
    let mut unit = vec![0.0; m * d];
    let mut norms = vec![0.0; m];
    for i in 0..m {
        let row = &v[i * d..(i + 1) * d];
        let r = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        norms[i] = r;
        for k in 0..d {
            unit[i * d + k] = row[k] / r.max(eps);
        }
    }
    (unit, norms)
}

/// Returns `(mean loss, row-wise softmax probabilities)` using a
/// max-shifted log-sum-exp.
pub(crate) fn softmax_cross_entropy_value(logits: &[f64], labels: &[usize], c: usize) -> (f64, Vec<f64>) {
    let mut probs = vec![0.0; logits.len()];
    let mut total = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        let row = &logits[r * c..(r + 1) * c];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let lse = max + z.ln();
        total += lse - row[y];
        for k in 0..c {
            probs[r * c + k] = (row[k] - max).exp() / z;
        }
    }
    (total / labels.len() as f64, probs)
}

/// tanh-approximated GELU and its derivative.
fn gelu(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    let inner = C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let y = 0.5 * x * (1.0 + t);
    let dinner = C * (1.0 + 3.0 * 0.044715 * x * x);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner;
    (y, dy)
}
