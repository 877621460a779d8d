//! Central finite-difference verification of analytic gradients.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::ParamStore;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// max |analytic − numeric| / max(1, |analytic|, |numeric|)
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub entries_checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

pub fn grad_check<F>(store: &mut ParamStore, names: &[&str], eps: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore, &mut Graph) -> Result<Var>,
{
    grad_check_with_hook(store, names, eps, f, |_, _| {})
}

/// Like [`grad_check`], but lets `hook` rewrite each analytic gradient
/// before comparison. Used for negative controls.
pub fn grad_check_with_hook<F, H>(
    store: &mut ParamStore,
    names: &[&str],
    eps: f64,
    f: F,
    hook: H,
) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore, &mut Graph) -> Result<Var>,
    H: Fn(&str, &mut [f64]),
{
    if !(eps > 0.0 && eps <= 1e-3) {
        return Err(Error::Precondition(format!("grad_check eps {eps} not in (0, 1e-3]")));
    }
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let out = f(store, &mut g)?;
        let v = g.scalar(out);
        if !v.is_finite() {
            return Err(Error::Numeric(format!("objective evaluated to {v}")));
        }
        Ok(v)
    };

    let mut g = Graph::new();
    let root = f(store, &mut g)?;
    if !g.scalar(root).is_finite() {
        return Err(Error::Numeric(format!("objective evaluated to {}", g.scalar(root))));
    }
    g.backward(root)?;

    let mut report = GradCheckReport { max_rel_error: 0.0, worst: None, entries_checked: 0 };
    for &name in names {
        let len = store.get(name)?.numel();
        let mut analytic = g
            .bindings()
            .iter()
            .find(|(n, _)| n == name)
            .and_then(|(_, v)| g.grad(*v))
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; len]);
        hook(name, &mut analytic);
        for (i, &a) in analytic.iter().enumerate() {
            let original = store.get(name)?.data[i];
            store.get_mut(name)?.data[i] = original + eps;
            let plus = eval(store);
            store.get_mut(name)?.data[i] = original - eps;
            let minus = eval(store);
            store.get_mut(name)?.data[i] = original;
            let numeric = (plus? - minus?) / (2.0 * eps);
            let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            report.entries_checked += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((name.to_owned(), i));
            }
        }
    }
    Ok(report)
}
