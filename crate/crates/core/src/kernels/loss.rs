use crate::error::Result;
use crate::tensor::{Scalar, Tensor};

/// Batch-mean of per-item squared L2 residual norms.
///
/// `loss = (1/T) * sum_i ||pred_i - target_i||^2` with `T` the batch size, and
/// `grad = (2/T) * (pred - target)`. The sum is accumulated in `f64`.
pub fn mse_loss<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<(T, Tensor<T>)> {
    pred.ensure_same_shape(target, "mse")?;
    let batch = pred.batch().max(1) as f64;
    let mut total = 0.0f64;
    let mut grad = Tensor::zeros(pred.shape());
    let g_scale = T::from_f64(2.0 / batch);
    for ((g, &p), &t) in grad.data_mut().iter_mut().zip(pred.data()).zip(target.data()) {
        let r = p - t;
        total += r.as_f64() * r.as_f64();
        *g = g_scale * r;
    }
    Ok((T::from_f64(total / batch), grad))
}
