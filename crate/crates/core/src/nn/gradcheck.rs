use crate::autodiff::{compare_with_central_differences, GradCheck, Var};
use crate::error::Result;
use crate::nn::params::{Graph, ParamStore};

/// Finite-difference check of a scalar loss against every parameter of `store`.
///
/// With `coords_per_param = Some(n)`, at most `n` evenly spaced coordinates of
/// each tensor are probed; `None` probes all of them. `worst_index` in the
/// result names the parameter tensor holding the largest error.
pub fn param_gradcheck<F>(store: &ParamStore, f: F, h: f64, coords_per_param: Option<usize>) -> Result<GradCheck>
where
    F: Fn(&mut Graph<'_>) -> Result<Var>,
{
    let (analytic, root_finite) = {
        let mut g = Graph::new(store, true);
        let root = f(&mut g)?;
        g.backward(root)?;
        (g.param_grads(), g.value(root).is_finite())
    };
    if !root_finite {
        return Ok(GradCheck { finite: false, ..GradCheck::default() });
    }
    let mut work = store.clone();
    let mut total = GradCheck::default();
    for id in store.ids() {
        let n = store.get(id).numel();
        let grad = analytic[id.index()].as_ref().map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; n]);
        let coords: Vec<usize> = match coords_per_param {
            Some(k) if k < n => (0..k).map(|i| i * n / k).collect(),
            _ => (0..n).collect(),
        };
        let part = compare_with_central_differences(&grad, coords, h, |i, delta| {
            let orig = store.get(id).data()[i];
            work.get_mut(id).data_mut()[i] = orig + delta;
            let mut g = Graph::new(&work, false);
            let value = f(&mut g).map(|r| g.value(r).item());
            drop(g);
            work.get_mut(id).data_mut()[i] = orig;
            value
        })?;
        if part.max_rel_error > total.max_rel_error {
            total.max_rel_error = part.max_rel_error;
            total.worst_index = id.index();
        }
        total.coords_checked += part.coords_checked;
        total.finite &= part.finite;
    }
    Ok(total)
}
