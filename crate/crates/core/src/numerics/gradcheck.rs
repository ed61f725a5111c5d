//! Central finite-difference verification of analytic gradients.

use super::graph::{Graph, Var};
use super::param::{ParamId, ParamStore};
use crate::error::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub coordinates: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

fn evaluate<F>(store: &ParamStore, f: &F) -> Result<f64>
where
    F: Fn(&mut Graph<'_>) -> Result<Var>,
{
    let mut g = Graph::new(store);
    let out = f(&mut g)?;
    Ok(g.scalar(out))
}

/// Compares the analytic gradient of the scalar `f` with central differences
/// for every coordinate of the listed parameters (all parameters when `ids` is
/// empty). `f` must be deterministic.
///
/// The error per coordinate is `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn grad_check<F>(store: &mut ParamStore, ids: &[ParamId], step: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_>) -> Result<Var>,
{
    let ids: Vec<ParamId> = if ids.is_empty() { store.ids().collect() } else { ids.to_vec() };
    let analytic: Vec<Vec<f64>> = {
        let mut g = Graph::new(store);
        let out = f(&mut g)?;
        let grads = g.backward(out)?;
        ids.iter().map(|&id| grads.param_dense(id, store)).collect()
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coordinates: 0,
    };
    for (&id, analytic) in ids.iter().zip(&analytic) {
        for idx in 0..store.value(id).len() {
            let original = store.value(id).data()[idx];
            store.value_mut(id).data_mut()[idx] = original + step;
            let plus = evaluate(store, &f);
            store.value_mut(id).data_mut()[idx] = original - step;
            let minus = evaluate(store, &f);
            store.value_mut(id).data_mut()[idx] = original;
            let numeric = (plus? - minus?) / (2.0 * step);
            let a = analytic[idx];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            report.coordinates += 1;
            if err > report.max_rel_error || err.is_nan() {
                report.max_rel_error = if err.is_nan() { f64::INFINITY } else { err };
                report.worst = Some((store.get(id).name.clone(), idx));
            }
        }
    }
    Ok(report)
}
