//! Central finite-difference checks against autograd.

use candle_core::{DType, Tensor, Var};

use crate::error::Result;

#[derive(Clone, Debug)]
pub struct GradReport {
    /// Worst `|analytic - numeric| / max(|analytic|, |numeric|, floor)` over checked entries.
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub checked: usize,
}

/// Compares the gradient of `loss` w.r.t. selected entries of `var` with
/// central differences of step `h`. `indices` are flat element positions.
/// The variable must be `f64`.
pub fn check<F>(var: &Var, indices: &[usize], h: f64, floor: f64, mut loss: F) -> Result<GradReport>
where
    F: FnMut() -> Result<Tensor>,
{
    assert_eq!(var.dtype(), DType::F64, "finite differences need f64");
    let analytic = {
        let l = loss()?;
        let grads = l.backward()?;
        match grads.get(var.as_tensor()) {
            Some(g) => g.flatten_all()?.to_vec1::<f64>()?,
            None => vec![0.0; var.elem_count()],
        }
    };
    let shape = var.shape().clone();
    let base = var.as_tensor().flatten_all()?.to_vec1::<f64>()?;
    let mut report = GradReport { max_rel_err: 0.0, max_abs_err: 0.0, checked: 0 };
    for &i in indices {
        let mut eval = |delta: f64| -> Result<f64> {
            let mut v = base.clone();
            v[i] += delta;
            var.set(&Tensor::from_vec(v, shape.clone(), var.device())?)?;
            Ok(loss()?.to_scalar::<f64>()?)
        };
        let numeric = (eval(h)? - eval(-h)?) / (2.0 * h);
        let a = analytic[i];
        let abs = (a - numeric).abs();
        let rel = abs / a.abs().max(numeric.abs()).max(floor);
        report.max_abs_err = report.max_abs_err.max(abs);
        report.max_rel_err = report.max_rel_err.max(rel);
        report.checked += 1;
    }
    var.set(&Tensor::from_vec(base, shape, var.device())?)?;
    Ok(report)
}
