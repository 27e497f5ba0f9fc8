use super::graph::{Graph, NodeId};
use super::params::ParamStore;
use crate::error::Result;

/// Outcome of comparing analytic gradients against central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub checked: usize,
}

/// Compares reverse-mode gradients of `loss_fn` with central finite
/// differences over every trainable scalar in `store`.
///
/// The error for one scalar is `|analytic - fd| / max(|analytic|, |fd|, 1e-12)`
/// and the report carries the maximum. Values are restored after each probe.
pub fn grad_check<F>(store: &mut ParamStore, eps: f64, loss_fn: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph) -> Result<NodeId>,
{
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::new(store);
        let loss = loss_fn(&mut g)?;
        Ok(g.value(loss).item())
    };
    let analytic = {
        let mut g = Graph::new(store);
        let loss = loss_fn(&mut g)?;
        g.backward(loss)?
    };
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        checked: 0,
    };
    for id in store.ids().collect::<Vec<_>>() {
        if !store.get(id).trainable {
            continue;
        }
        let n = store.value(id).len();
        let dense = analytic.param(id);
        for i in 0..n {
            let orig = store.value(id).data()[i];
            store.value_mut(id).data_mut()[i] = orig + eps;
            let plus = eval(store);
            store.value_mut(id).data_mut()[i] = orig - eps;
            let minus = eval(store);
            store.value_mut(id).data_mut()[i] = orig;
            let fd = (plus? - minus?) / (2.0 * eps);
            let a = dense.as_ref().map_or(0.0, |g| g[i]);
            let denom = a.abs().max(fd.abs()).max(1e-12);
            let err = (a - fd).abs() / denom;
            report.checked += 1;
            if err > report.max_relative_error {
                report.max_relative_error = err;
                report.worst_param = store.get(id).name.clone();
                report.worst_index = i;
            }
        }
    }
    Ok(report)
}
