//! Central finite-difference gradient checking.

use crate::tensor::Tensor;

/// Relative error used by the checks: `|a - n| / max(|a|, |n|, floor)`.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Numeric gradient of scalar `f` at `x` by central differences with step `h`.
pub fn numeric_grad(x: &Tensor, h: f64, mut f: impl FnMut(&Tensor) -> f64) -> Vec<f64> {
    let mut probe = x.clone();
    (0..x.numel())
        .map(|i| {
            let x0 = x.data()[i];
            probe.data_mut()[i] = x0 + h;
            let fp = f(&probe);
            probe.data_mut()[i] = x0 - h;
            let fm = f(&probe);
            probe.data_mut()[i] = x0;
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

/// Largest relative error between `analytic` and central differences of `f`.
pub fn max_rel_error(x: &Tensor, analytic: &[f64], h: f64, floor: f64, f: impl FnMut(&Tensor) -> f64) -> f64 {
    numeric_grad(x, h, f)
        .iter()
        .zip(analytic)
        .map(|(&n, &a)| rel_err(a, n, floor))
        .fold(0.0, f64::max)
}
