//! Central finite differences, the gradient oracle for every backward kernel.

use rand_core::RngCore;

use crate::tensor::{Scalar, Tensor};

/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for every component of `x`.
pub fn finite_difference_grad<T: Scalar>(
    mut f: impl FnMut(&Tensor<T>) -> f64,
    x: &Tensor<T>,
    step: f64,
) -> Tensor<T> {
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = T::from_f64(orig.as_f64() + step);
        let plus = f(&probe);
        probe.data_mut()[i] = T::from_f64(orig.as_f64() - step);
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = T::from_f64((plus - minus) / (2.0 * step));
    }
    grad
}

/// Largest component-wise relative error between an analytic and a numeric gradient.
///
/// Each component is compared as `|a - n| / max(|a|, |n|, floor)`, where the
/// floor is `1e-3` of the largest magnitude in either tensor (and at least
/// `1e-12`), so components that are zero up to rounding are measured against
/// the tensor's scale rather than against their own noise.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    let scale = analytic
        .iter()
        .chain(numeric)
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (1e-3 * scale).max(1e-12);
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Tensor of i.i.d. uniform values in `[-1, 1)`.
pub fn random_tensor<T: Scalar>(shape: [usize; 4], rng: &mut impl RngCore) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::from_f64(uniform_symmetric(rng)))
}

/// Uniform in `[-1, 1)` from the top 53 bits of one `u64` draw.
pub(crate) fn uniform_symmetric(rng: &mut impl RngCore) -> f64 {
    let unit = (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
    2.0 * unit - 1.0
}
