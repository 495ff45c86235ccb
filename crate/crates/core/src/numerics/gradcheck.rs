use super::graph::{Graph, NodeId};
use super::params::{ParamId, ParamStore};
use crate::error::Result;

/// Outcome of comparing analytic gradients with central differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: Option<String>,
    pub entries_checked: usize,
}

/// Denominator floor so exactly-zero gradients compare by absolute error.
const REL_FLOOR: f64 = 1e-4;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Checks `d loss / d param` for `ids` against central finite differences
/// with step `eps`. At most `max_per_param` evenly spaced entries of each
/// parameter are perturbed.
pub fn grad_check<F>(
    store: &mut ParamStore,
    ids: &[ParamId],
    eps: f64,
    max_per_param: usize,
    loss_fn: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_>) -> Result<NodeId>,
{
    let grads = {
        let mut g = Graph::new(store);
        let loss = loss_fn(&mut g)?;
        g.backward(loss)?
    };
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::new(store);
        let loss = loss_fn(&mut g)?;
        Ok(g.scalar(loss))
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: None,
        entries_checked: 0,
    };
    for &id in ids {
        let analytic = grads.get(store, id);
        let n = analytic.len();
        let stride = n.div_ceil(max_per_param.max(1)).max(1);
        for i in (0..n).step_by(stride) {
            let orig = store.get(id).data()[i];
            store.get_mut(id).data_mut()[i] = orig + eps;
            let up = eval(store)?;
            store.get_mut(id).data_mut()[i] = orig - eps;
            let down = eval(store)?;
            store.get_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let err = relative_error(analytic[i], numeric);
            report.entries_checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst_param = Some(format!("{}[{i}]", store.param(id).name));
            }
        }
    }
    Ok(report)
}
