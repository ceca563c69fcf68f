//! Central finite-difference verification of analytic gradients.

use super::{backward, ParamStore, Tensor, TensorError};
use serde::Serialize;

/// Outcome of a finite-difference check over every registered parameter.
#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    /// Worst relative error per parameter, in registration order.
    pub per_param: Vec<(String, f64)>,
    pub global_max_relative_error: f64,
    /// Parameter holding the worst entry.
    pub worst_param: String,
    pub pass: bool,
    pub step: f64,
    pub tolerance: f64,
}

/// Relative error with an absolute floor of 1e-12.
pub(crate) fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12)
}

/// Compare analytic gradients of `f` against central differences
/// `(f(θ+h)−f(θ−h))/2h` for every entry of every parameter in `store`.
///
/// `f` must rebuild the forward graph from the current parameter values on
/// each call and return the scalar loss. A non-deterministic `f` (two calls
/// at the same point giving different values) is rejected.
pub fn gradcheck(
    f: &dyn Fn() -> Result<Tensor, TensorError>,
    store: &ParamStore,
    h: f64,
    tol: f64,
) -> Result<GradCheckReport, TensorError> {
    assert!(h > 0.0, "gradcheck step must be positive");

    let loss = f()?;
    let base = loss.item();
    let check = f()?;
    if check.item().to_bits() != base.to_bits() {
        return Err(TensorError::NonDeterministic);
    }
    let grads = backward(&loss, store)?;

    let mut per_param = Vec::with_capacity(store.len());
    let mut global = 0.0f64;
    let mut worst = String::new();
    for (name, param) in store.iter() {
        let analytic = grads
            .get(name)
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; param.numel()]);
        let mut worst_here = 0.0f64;
        let n = param.numel();
        for i in 0..n {
            let orig = param.data()[i];
            poke(param, i, orig + h);
            let fp = f()?.item();
            poke(param, i, orig - h);
            let fm = f()?.item();
            poke(param, i, orig);
            let numeric = (fp - fm) / (2.0 * h);
            let err = relative_error(analytic[i], numeric);
            if err > worst_here {
                worst_here = err;
            }
        }
        if worst_here > global {
            global = worst_here;
            worst = name.to_string();
        }
        per_param.push((name.to_string(), worst_here));
    }

    Ok(GradCheckReport {
        per_param,
        global_max_relative_error: global,
        worst_param: worst,
        pass: global <= tol,
        step: h,
        tolerance: tol,
    })
}

fn poke(param: &Tensor, idx: usize, value: f64) {
    param.inner.data.borrow_mut()[idx] = value;
}
