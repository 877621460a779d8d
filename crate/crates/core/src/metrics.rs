//! Classification metrics.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Mann–Whitney AUC of `scores` where `positive[k]` marks positives; tied
/// scores count one half.
fn binary_auc(scores: &[f64], positive: &[bool]) -> f64 {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let n_pos = positive.iter().filter(|&&p| p).count() as f64;
    let n_neg = scores.len() as f64 - n_pos;
    let mut rank_sum = 0.0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        // ranks are 1-based; tied block shares the midrank
        let midrank = (start + 1 + end) as f64 / 2.0;
        rank_sum += midrank * order[start..end].iter().filter(|&&k| positive[k]).count() as f64;
        start = end;
    }
    (rank_sum - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg)
}

/// One-vs-one ROC AUC: for every unordered pair of classes present in
/// `labels`, average the AUC of class `i` against `j` (scored by column `i`)
/// and of `j` against `i` (scored by column `j`) on the rows labeled `i` or
/// `j`; then take the unweighted mean over pairs.
pub fn roc_auc_ovo(probs: &Tensor, labels: &[usize]) -> Result<f64> {
    let (q, c) = probs.dims2();
    if labels.len() != q {
        return Err(Error::dim("roc_auc_ovo", format!("{} labels for {q} rows", labels.len())));
    }
    if q < 2 {
        return Err(Error::Precondition("roc_auc_ovo needs at least two samples".into()));
    }
    if let Some(bad) = labels.iter().find(|&&y| y >= c) {
        return Err(Error::Index(format!("label {bad} outside {c} score columns")));
    }
    let present: Vec<usize> = (0..c).filter(|k| labels.contains(k)).collect();
    let mut total = 0.0;
    let mut pairs = 0usize;
    for (a, &i) in present.iter().enumerate() {
        for &j in &present[a + 1..] {
            let rows: Vec<usize> = (0..q).filter(|&r| labels[r] == i || labels[r] == j).collect();
            let is_i: Vec<bool> = rows.iter().map(|&r| labels[r] == i).collect();
            let is_j: Vec<bool> = is_i.iter().map(|b| !b).collect();
            let si: Vec<f64> = rows.iter().map(|&r| probs.data[r * c + i]).collect();
            let sj: Vec<f64> = rows.iter().map(|&r| probs.data[r * c + j]).collect();
            total += (binary_auc(&si, &is_i) + binary_auc(&sj, &is_j)) / 2.0;
            pairs += 1;
        }
    }
    if pairs == 0 {
        return Err(Error::UndefinedMetric("fewer than two classes present".into()));
    }
    Ok(total / pairs as f64)
}

/// Argmax of each row, lowest index on ties.
pub fn argmax_rows(probs: &Tensor) -> Vec<usize> {
    let (r, c) = probs.dims2();
    (0..r)
        .map(|i| {
            let row = &probs.data[i * c..(i + 1) * c];
            let mut best = 0;
            for k in 1..c {
                if row[k] > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

pub fn accuracy(probs: &Tensor, labels: &[usize]) -> Result<f64> {
    let pred = argmax_rows(probs);
    if pred.len() != labels.len() {
        return Err(Error::dim("accuracy", format!("{} labels for {} rows", labels.len(), pred.len())));
    }
    if pred.is_empty() {
        return Err(Error::Precondition("accuracy over zero samples".into()));
    }
    let hits = pred.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / labels.len() as f64)
}
