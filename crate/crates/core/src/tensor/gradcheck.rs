//! Central finite-difference gradient checking.

use crate::error::{Error, Result};

use super::{no_grad, Elem, Tensor};

/// Check the analytic gradient of a scalar-valued function against central
/// finite differences, perturbing `x` coordinate by coordinate.
///
/// Returns the max over coordinates of
/// `|analytic − central| / (|central| + eps_div)` with per-coordinate step
/// `h = h_rel · max(1, |x_i|)`. The function must be deterministic; this is
/// verified by evaluating it twice up front.
pub fn finite_diff_check<E, F>(f: F, x: &Tensor<E>, h_rel: f64, eps_div: f64) -> Result<f64>
where
    E: Elem,
    F: Fn() -> Result<Tensor<E>>,
{
    if h_rel <= 0.0 {
        return Err(Error::GradCheck(format!("step must be > 0, got {h_rel}")));
    }
    let eval = || -> Result<f64> {
        let out = no_grad(&f)?;
        if out.numel() != 1 {
            return Err(Error::GradCheck(format!(
                "function must be scalar-valued, got shape {:?}",
                out.shape()
            )));
        }
        Ok(out.item().as_f64())
    };

    let v1 = eval()?;
    let v2 = eval()?;
    if v1.to_bits() != v2.to_bits() {
        return Err(Error::GradCheck(format!(
            "non-deterministic function: repeated evaluation gave {v1} vs {v2}"
        )));
    }

    // Analytic pass.
    x.zero_grad();
    let loss = f()?;
    loss.backward()?;
    let analytic = x.grad_or_zeros();

    let base = x.data_vec();
    let mut max_rel = 0.0f64;
    for i in 0..base.len() {
        let xi = base[i].as_f64();
        let h = h_rel * xi.abs().max(1.0);

        let mut plus = base.clone();
        plus[i] = E::from_f(xi + h);
        x.set_data(plus)?;
        let lp = eval()?;

        let mut minus = base.clone();
        minus[i] = E::from_f(xi - h);
        x.set_data(minus)?;
        let lm = eval()?;

        let fd = (lp - lm) / (2.0 * h);
        let rel = (analytic[i].as_f64() - fd).abs() / (fd.abs() + eps_div);
        if rel > max_rel {
            max_rel = rel;
        }
    }
    x.set_data(base)?;
    Ok(max_rel)
}
