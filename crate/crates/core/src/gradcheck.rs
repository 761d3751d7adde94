//! Central finite differences, used as an oracle for tape gradients.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `(f(x + h·eᵢ) − f(x − h·eᵢ)) / 2h` for every coordinate `i`.
///
/// `f` sees plain tensors only, so this never touches a tape.
pub fn finite_diff_grad<F>(mut f: F, x: &Tensor, h: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite(format!(
                "objective at coordinate {i}: f(x+h) = {up}, f(x-h) = {down}"
            )));
        }
        grad.data_mut()[i] = (up - down) / (2.0 * h);
    }
    Ok(grad)
}

/// `max|g − fd| / max(max|fd|, max|g|, tiny)` over one parameter tensor.
pub fn relative_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    let scale = numeric.max_abs().max(analytic.max_abs()).max(1e-12);
    analytic.max_abs_diff(numeric) / scale
}
