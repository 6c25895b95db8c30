//! Central finite-difference verification of tape gradients.

use super::{no_grad, Tensor};
use crate::error::{invalid, Error, Result};

/// Largest `|analytic - numeric| / max(1, |analytic|)` over all coordinates
/// of `x`, with the numeric gradient taken by central differences of step `h`.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    if !(h > 0.0) {
        return Err(invalid(format!("grad_check: step must be positive, got {h}")));
    }
    let leaf = x.detach().requires_grad_(true);
    let out = f(&leaf)?;
    if out.numel() != 1 {
        return Err(invalid(format!("grad_check: f must be scalar, got shape {:?}", out.shape())));
    }
    if !out.item().is_finite() {
        return Err(Error::NonFinite("grad_check: f(x) is not finite".into()));
    }
    out.backward()?;
    let analytic = leaf.grad().unwrap_or_else(|| vec![0.0; x.numel()]);

    let base = x.to_vec();
    let eval = |probe: Vec<f64>| -> Result<f64> {
        let t = Tensor::new(x.shape(), probe)?;
        no_grad(|| f(&t)).map(|v| v.item())
    };
    let mut worst = 0.0f64;
    for (i, &a) in analytic.iter().enumerate() {
        let mut plus = base.clone();
        plus[i] += h;
        let mut minus = base.clone();
        minus[i] -= h;
        let (fp, fm) = (eval(plus)?, eval(minus)?);
        if !fp.is_finite() || !fm.is_finite() || !a.is_finite() {
            return Err(Error::NonFinite(format!(
                "grad_check: coordinate {i} gave f(x+h)={fp}, f(x-h)={fm}, analytic={a}"
            )));
        }
        let numeric = (fp - fm) / (2.0 * h);
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_sum_is_tight() {
        let x = Tensor::from_slice(&[-2.0, -0.3, 0.0, 0.7, 3.1]);
        let err = grad_check(|x| Ok(x.sigmoid().sum_all()), &x, 1e-5).unwrap();
        assert!(err < 1e-7, "{err}");
    }

    #[test]
    fn affine_is_exact_for_any_step() {
        let x = Tensor::from_slice(&[0.25, -1.5, 2.0]);
        let w = Tensor::from_slice(&[3.0, -0.5, 0.125]);
        for h in [1e-6, 1e-3, 0.5] {
            let err = grad_check(|x| Ok(x.mul(&w)?.sum_all().add_scalar(4.0)), &x, h).unwrap();
            assert!(err < 1e-9, "h={h}: {err}");
        }
    }

    #[test]
    fn reports_non_finite_coordinate() {
        let x = Tensor::from_slice(&[1.0, 1e-9]);
        let err = grad_check(|x| Ok(x.ln().sum_all()), &x, 1e-5).unwrap_err();
        assert!(err.to_string().contains("coordinate 1"), "{err}");
    }
}
