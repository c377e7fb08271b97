//! Central finite-difference gradient oracle used throughout the test suite.

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::Result;

/// Outcome of a finite-difference comparison.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheck {
    /// `max_i |analytic_i - numeric_i| / max(1, |analytic_i|)`.
    pub max_rel_error: f64,
    /// Coordinate where the maximum was attained.
    pub worst_index: usize,
    pub coords_checked: usize,
    /// False when any evaluated value or gradient was NaN or infinite.
    pub finite: bool,
}

impl GradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.finite && self.max_rel_error < tol
    }

    fn merge(self, other: GradCheck, offset: usize) -> GradCheck {
        let (max_rel_error, worst_index) = if other.max_rel_error > self.max_rel_error {
            (other.max_rel_error, other.worst_index + offset)
        } else {
            (self.max_rel_error, self.worst_index)
        };
        GradCheck {
            max_rel_error,
            worst_index,
            coords_checked: self.coords_checked + other.coords_checked,
            finite: self.finite && other.finite,
        }
    }
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck { max_rel_error: 0.0, worst_index: 0, coords_checked: 0, finite: true }
    }
}

/// Compares `analytic[i]` against `(f(x_i + h) - f(x_i - h)) / 2h` for every
/// coordinate in `coords`. `eval_shifted(i, delta)` must return `f` with
/// coordinate `i` displaced by `delta` and every other coordinate untouched.
pub fn compare_with_central_differences(
    analytic: &[f64],
    coords: impl IntoIterator<Item = usize>,
    h: f64,
    mut eval_shifted: impl FnMut(usize, f64) -> Result<f64>,
) -> Result<GradCheck> {
    let mut out = GradCheck { finite: analytic.iter().all(|g| g.is_finite()), ..GradCheck::default() };
    for i in coords {
        let plus = eval_shifted(i, h)?;
        let minus = eval_shifted(i, -h)?;
        let numeric = (plus - minus) / (2.0 * h);
        out.coords_checked += 1;
        if !numeric.is_finite() {
            out.finite = false;
            continue;
        }
        let err = (analytic[i] - numeric).abs() / analytic[i].abs().max(1.0);
        if err > out.max_rel_error {
            out.max_rel_error = err;
            out.worst_index = i;
        }
    }
    Ok(out)
}

/// Finite-difference check of a scalar function of one tensor, over all coordinates.
pub fn finite_diff_check<F>(f: F, x: &Tensor, h: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    finite_diff_check_many(|t, xs| f(t, xs[0]), std::slice::from_ref(x), h)
}

/// Finite-difference check of a scalar function of several tensors. The
/// reported `worst_index` counts coordinates across inputs in order.
pub fn finite_diff_check_many<F>(f: F, xs: &[Tensor], h: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let leaves: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
    let root = f(&mut tape, &leaves)?;
    tape.backward(root)?;
    if !tape.value(root).is_finite() {
        return Ok(GradCheck { finite: false, ..GradCheck::default() });
    }

    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| t.constant(x.clone())).collect();
        let r = f(&mut t, &vars)?;
        Ok(t.value(r).item())
    };

    let mut total = GradCheck::default();
    let mut offset = 0;
    let mut work: Vec<Tensor> = xs.to_vec();
    for (k, (x, leaf)) in xs.iter().zip(&leaves).enumerate() {
        let analytic = tape.grad(*leaf).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; x.numel()]);
        let part = compare_with_central_differences(&analytic, 0..x.numel(), h, |i, delta| {
            work[k].data_mut()[i] = x.data()[i] + delta;
            let v = eval(&work);
            work[k].data_mut()[i] = x.data()[i];
            v
        })?;
        total = total.merge(part, offset);
        offset += x.numel();
    }
    Ok(total)
}
