use super::graph::{Graph, NodeId};
use super::params::{ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Default central-difference step.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Compares the analytic gradient of a scalar graph with central finite
/// differences, coordinate by coordinate, for one parameter.
///
/// `build` must be deterministic: it is re-run for every perturbed
/// coordinate. Returns the maximum of
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<B>(store: &ParamStore<f64>, param: ParamId, step: f64, build: B) -> Result<f64>
where
    B: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<NodeId>,
{
    let all: Vec<usize> = (0..store.get(param).len()).collect();
    grad_check_coords(store, param, &all, step, build)
}

/// [`grad_check`] restricted to the listed coordinates of `param`.
pub fn grad_check_coords<B>(store: &ParamStore<f64>, param: ParamId, coords: &[usize], step: f64, build: B) -> Result<f64>
where
    B: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<NodeId>,
{
    let n = store.get(param).len();
    if let Some(&j) = coords.iter().find(|&&j| j >= n) {
        return Err(Error::InvalidArgument(format!("coordinate {j} outside parameter of size {n}")));
    }
    let mut g = Graph::new();
    let out = build(&mut g, store)?;
    let grads = g.backward(out)?;
    let analytic = grads
        .param(param)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(store.get(param).dims()));

    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let out = build(&mut g, s)?;
        let v = g.scalar_value(out);
        if !v.is_finite() {
            return Err(Error::NonFinite("grad_check objective".into()));
        }
        Ok(v)
    };

    let mut work = store.clone();
    let mut worst = 0.0f64;
    for &j in coords {
        let orig = store.get(param).data()[j];
        work.get_mut(param).data_mut()[j] = orig + step;
        let up = eval(&work)?;
        work.get_mut(param).data_mut()[j] = orig - step;
        let down = eval(&work)?;
        work.get_mut(param).data_mut()[j] = orig;
        let numeric = (up - down) / (2.0 * step);
        let a = analytic.data()[j];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Runs [`grad_check`] for every parameter in the store and returns the
/// worst error together with the parameter that produced it.
pub fn grad_check_all<B>(store: &ParamStore<f64>, step: f64, build: B) -> Result<(f64, Option<String>)>
where
    B: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<NodeId>,
{
    let mut worst = (0.0, None);
    for id in store.ids() {
        let e = grad_check(store, id, step, &build)?;
        if worst.1.is_none() || e > worst.0 {
            worst = (e, Some(store.name(id).to_string()));
        }
    }
    Ok(worst)
}
