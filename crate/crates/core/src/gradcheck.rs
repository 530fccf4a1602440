//! Central finite-difference checks of tape gradients.
//!
//! The numerical side only ever evaluates forward values, so it stays
//! independent of every backward rule it is used to verify.

use crate::autograd::{ParamId, ParamStore, Tape, Var};
use crate::tensor::Mat;

#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    pub max_abs_error: f64,
    /// `max |a - n| / max(|a|, |n|, 1e-8)` over entries whose magnitude is
    /// not negligible; see [`relative_error`].
    pub max_rel_error: f64,
    pub max_grad: f64,
}

/// Relative error that does not blow up for gradients that are zero up to
/// finite-difference noise.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    let scale = analytic.abs().max(numeric.abs());
    if scale < 1e-7 {
        // Both essentially zero: report the absolute gap instead.
        diff
    } else {
        diff / scale
    }
}

/// Compares the analytic gradient of `f` at `x` with central differences of step `h`.
pub fn check_gradient<F>(x: &Mat, h: f64, f: F) -> GradCheck
where
    F: Fn(&mut Tape, Var) -> Var,
{
    let mut tape = Tape::new();
    let xv = tape.input(x.clone());
    let out = f(&mut tape, xv);
    let grads = tape.backward(out);
    let analytic = grads
        .get(xv)
        .cloned()
        .unwrap_or_else(|| Mat::zeros(x.rows(), x.cols()));

    let eval = |m: &Mat| {
        let mut t = Tape::new();
        let v = t.input(m.clone());
        let o = f(&mut t, v);
        t.value(o).item()
    };

    let mut report = GradCheck {
        max_abs_error: 0.0,
        max_rel_error: 0.0,
        max_grad: 0.0,
    };
    let mut probe = x.clone();
    for k in 0..x.len() {
        let orig = probe.as_slice()[k];
        probe.as_mut_slice()[k] = orig + h;
        let plus = eval(&probe);
        probe.as_mut_slice()[k] = orig - h;
        let minus = eval(&probe);
        probe.as_mut_slice()[k] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        let a = analytic.as_slice()[k];
        report.max_abs_error = report.max_abs_error.max((a - numeric).abs());
        report.max_rel_error = report.max_rel_error.max(relative_error(a, numeric));
        report.max_grad = report.max_grad.max(a.abs());
    }
    report
}
/// Like [`check_gradient`] but differentiates with respect to the stored
/// parameter `id`; the other parameters stay fixed.
pub fn check_param_gradient<F>(store: &ParamStore, id: ParamId, h: f64, f: F) -> GradCheck
where
    F: Fn(&mut Tape, &ParamStore) -> Var,
{
    let mut tape = Tape::new();
    let out = f(&mut tape, store);
    let grads = tape.backward(out);
    let x = store.get(id).clone();
    let analytic = grads
        .param(id)
        .cloned()
        .unwrap_or_else(|| Mat::zeros(x.rows(), x.cols()));
    let mut probe = store.clone();
    let mut eval = |v: f64, k: usize| {
        probe.get_mut(id).as_mut_slice()[k] = v;
        let mut t = Tape::new();
        let o = f(&mut t, &probe);
        t.value(o).item()
    };
    let mut report = GradCheck {
        max_abs_error: 0.0,
        max_rel_error: 0.0,
        max_grad: 0.0,
    };
    for k in 0..x.len() {
        let orig = x.as_slice()[k];
        let plus = eval(orig + h, k);
        let minus = eval(orig - h, k);
        eval(orig, k);
        let numeric = (plus - minus) / (2.0 * h);
        let a = analytic.as_slice()[k];
        report.max_abs_error = report.max_abs_error.max((a - numeric).abs());
        report.max_rel_error = report.max_rel_error.max(relative_error(a, numeric));
        report.max_grad = report.max_grad.max(a.abs());
    }
    report
}

