//! Central finite-difference gradient checking.

use std::collections::BTreeMap;

use crate::graph::{Graph, NodeId};
use crate::tensor::{Result, TensorError};

/// Denominator floor of the relative error.
pub const REL_FLOOR: f64 = 1e-8;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Largest relative error between the reverse-mode gradient of `loss` with
/// respect to parameter `param` and the central difference
/// `(f(θ+h) - f(θ-h)) / 2h`, taken over every coordinate of the parameter.
pub fn grad_check(graph: &Graph, loss: NodeId, param: &str, h: f64) -> Result<f64> {
    if h <= 0.0 || !h.is_finite() {
        return Err(TensorError::InvalidArgument {
            op: "grad_check",
            msg: format!("step must be positive, got {h}"),
        });
    }
    let id = graph.param_id(param).ok_or_else(|| TensorError::InvalidArgument {
        op: "grad_check",
        msg: format!("unknown parameter {param:?}"),
    })?;
    let analytic = graph.backward(loss)?.wrt(graph, id);
    let base = graph.value(id).clone();
    let mut probe = graph.clone();
    let mut worst = 0.0f64;
    for (i, &a) in analytic.data().iter().enumerate() {
        probe.set_leaf(id, base.perturbed(i, h))?;
        probe.recompute()?;
        let plus = probe.value(loss).item();
        probe.set_leaf(id, base.perturbed(i, -h))?;
        probe.recompute()?;
        let minus = probe.value(loss).item();
        let numeric = (plus - minus) / (2.0 * h);
        worst = worst.max(relative_error(a, numeric));
    }
    Ok(worst)
}

/// [`grad_check`] for every registered parameter, keyed by name.
pub fn grad_check_all(graph: &Graph, loss: NodeId, h: f64) -> Result<BTreeMap<String, f64>> {
    graph
        .params()
        .keys()
        .map(|name| Ok((name.clone(), grad_check(graph, loss, name, h)?)))
        .collect()
}
