//! Central finite-difference gradient checking.
//!
//! The oracle perturbs each parameter element by `h = h_scale * max(1, |p|)`
//! and forms the central quotient in f64 regardless of the engine scalar,
//! so an `f32` graph is checked against a 64-bit difference quotient.
//! Intended for tests; the training loops never call into here.

use crate::error::Result;
use crate::graph::{Graph, NodeId, ParamId, Params};
use crate::scalar::{s, Scalar};

pub const DEFAULT_H_SCALE: f64 = 1e-3;

/// Worst observed deviation, normalized by `max(1, |analytic|, |fd|)`.
pub struct CheckReport {
    pub max_err: f64,
    pub checked: usize,
}

/// Compare analytic gradients of a scalar-valued graph against central
/// finite differences for every element of `check_ids`.
///
/// `build` must deterministically reconstruct the loss from the current
/// parameter values.
pub fn check<T: Scalar>(
    params: &mut Params<T>,
    check_ids: &[ParamId],
    h_scale: f64,
    build: impl Fn(&Params<T>, &mut Graph<T>) -> Result<NodeId>,
) -> Result<CheckReport> {
    params.zero_grads();
    let mut g = Graph::new();
    let root = build(params, &mut g)?;
    let grads = g.backward(root)?;
    params.accumulate(&g, &grads);

    let analytic: Vec<Vec<f64>> = check_ids
        .iter()
        .map(|&id| params.get(id).grad.data().iter().map(|v| v.to_f64().unwrap()).collect())
        .collect();

    let eval = |params: &Params<T>| -> Result<f64> {
        let mut g = Graph::new();
        let root = build(params, &mut g)?;
        Ok(g.value(root).item().to_f64().unwrap())
    };

    let mut max_err = 0.0f64;
    let mut checked = 0;
    for (slot, &id) in check_ids.iter().enumerate() {
        for i in 0..params.get(id).value.numel() {
            let orig = params.get(id).value.data()[i];
            let h = h_scale * orig.to_f64().unwrap().abs().max(1.0);

            params.get_mut(id).value.data_mut()[i] = orig + s::<T>(h);
            let lp = eval(params)?;
            params.get_mut(id).value.data_mut()[i] = orig - s::<T>(h);
            let lm = eval(params)?;
            params.get_mut(id).value.data_mut()[i] = orig;

            let fd = (lp - lm) / (2.0 * h);
            let a = analytic[slot][i];
            let err = (a - fd).abs() / a.abs().max(fd.abs()).max(1.0);
            if err > max_err {
                max_err = err;
            }
            checked += 1;
        }
    }
    Ok(CheckReport { max_err, checked })
}
