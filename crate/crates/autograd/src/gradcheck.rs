//! Central finite-difference checks.

use crate::array::Array;
use crate::error::Result;
use crate::var::Var;

/// Outcome of comparing an analytic gradient with central differences.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub analytic: Array,
    pub numeric: Array,
    /// ||analytic - numeric|| / max(||analytic||, ||numeric||, floor)
    pub rel_error: f64,
}

impl GradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.rel_error <= tol
    }
}

/// Compare d f / d x at `x` against central differences with step `eps`.
/// `f` must map an input var to a scalar var.
pub fn check_gradient(
    x: &Array,
    eps: f64,
    f: impl Fn(&Var) -> Result<Var>,
) -> Result<GradCheck> {
    let leaf = Var::leaf(x.clone());
    let out = f(&leaf)?;
    let grads = out.backward()?;
    let analytic = grads
        .get(&leaf)
        .cloned()
        .unwrap_or_else(|| Array::zeros(x.shape()));

    let mut numeric = Array::zeros(x.shape());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = f(&Var::constant(probe.clone()))?.item();
        probe.data_mut()[i] = orig - eps;
        let minus = f(&Var::constant(probe.clone()))?.item();
        probe.data_mut()[i] = orig;
        numeric.data_mut()[i] = (plus - minus) / (2.0 * eps);
    }
    let norm = |a: &Array| a.data().iter().map(|v| v * v).sum::<f64>().sqrt();
    let diff = norm(&analytic.zip_map(&numeric, |a, b| a - b));
    let scale = norm(&analytic).max(norm(&numeric)).max(1e-12);
    Ok(GradCheck {
        rel_error: diff / scale,
        analytic,
        numeric,
    })
}
