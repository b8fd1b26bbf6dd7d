use super::{backward, Tensor};
use crate::error::{contract, Error, Result};

/// Outcome of comparing reverse-mode gradients to central differences.
#[derive(Debug, Clone)]
pub struct GradCheck {
    /// max over coordinates of |analytic − numeric| / max(1, |numeric|).
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

/// Checks the gradient of the scalar function `f` at `x0` (with `shape`)
/// against central finite differences with step `h`.
pub fn grad_check<F>(f: F, x0: &[f64], shape: &[usize], h: f64) -> Result<GradCheck>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    if !(h > 0.0) {
        return Err(contract(format!("finite-difference step must be > 0, got {h}")));
    }
    let x = Tensor::param(x0.to_vec(), shape)?;
    let y = f(&x)?;
    if y.numel() != 1 {
        return Err(contract(format!("grad_check objective must be scalar, got {:?}", y.shape())));
    }
    if !y.item().is_finite() {
        return Err(Error::NonFinite { what: "grad_check objective at x0".into(), index: 0 });
    }
    let grads = backward(&y)?;
    let analytic = grads
        .get(&x)
        .map(|g| g.to_vec())
        .unwrap_or_else(|| vec![0.0; x0.len()]);

    let eval = |v: Vec<f64>| -> Result<f64> { Ok(f(&Tensor::new(v, shape)?)?.item()) };
    let mut numeric = Vec::with_capacity(x0.len());
    let (mut worst, mut worst_index) = (0.0f64, 0);
    for i in 0..x0.len() {
        let mut plus = x0.to_vec();
        plus[i] += h;
        let mut minus = x0.to_vec();
        minus[i] -= h;
        let (fp, fm) = (eval(plus)?, eval(minus)?);
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite { what: "grad_check objective".into(), index: i });
        }
        let central = (fp - fm) / (2.0 * h);
        let err = (analytic[i] - central).abs() / central.abs().max(1.0);
        if err > worst {
            worst = err;
            worst_index = i;
        }
        numeric.push(central);
    }
    Ok(GradCheck { max_rel_error: worst, worst_index, analytic, numeric })
}
