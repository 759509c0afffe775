use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Adam moment buffers, one pair per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T: Scalar> {
    pub first_moment: Vec<Tensor<T>>,
    pub second_moment: Vec<Tensor<T>>,
    /// Number of updates applied so far.
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Scalar> AdamState<T> {
    pub const BETA1: f64 = 0.9;
    pub const BETA2: f64 = 0.999;
    pub const EPS: f64 = 1e-8;

    /// Fresh state with zeroed moments shaped like `params`.
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor<T>>) -> Self {
        let first_moment: Vec<_> = params.into_iter().map(|p| Tensor::zeros(p.shape())).collect();
        AdamState {
            second_moment: first_moment.clone(),
            first_moment,
            step: 0,
            beta1: Self::BETA1,
            beta2: Self::BETA2,
            eps: Self::EPS,
        }
    }

    fn check(&self, params: &[&mut Tensor<T>], grads: &[Tensor<T>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::shape("gradient count", params.len(), grads.len()));
        }
        if params.len() != self.first_moment.len() || params.len() != self.second_moment.len() {
            return Err(Error::shape(
                "optimizer moment count",
                params.len(),
                self.first_moment.len(),
            ));
        }
        for (i, p) in params.iter().enumerate() {
            p.ensure_same_shape(&grads[i], &format!("gradient {i}"))?;
            p.ensure_same_shape(&self.first_moment[i], &format!("first moment {i}"))?;
            p.ensure_same_shape(&self.second_moment[i], &format!("second moment {i}"))?;
        }
        Ok(())
    }
}

/// One bias-corrected Adam update applied in place.
pub fn adam_step<T: Scalar>(
    params: &mut [&mut Tensor<T>],
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
    lr: f64,
) -> Result<()> {
    state.check(params, grads)?;
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let correct1 = 1.0 - b1.powi(t);
    let correct2 = 1.0 - b2.powi(t);
    for (i, param) in params.iter_mut().enumerate() {
        let m = state.first_moment[i].data_mut();
        let v = state.second_moment[i].data_mut();
        for (((p, &g), m), v) in param
            .data_mut()
            .iter_mut()
            .zip(grads[i].data())
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            let g = g.as_f64();
            let m_new = b1 * m.as_f64() + (1.0 - b1) * g;
            let v_new = b2 * v.as_f64() + (1.0 - b2) * g * g;
            *m = T::from_f64(m_new);
            *v = T::from_f64(v_new);
            let update = lr * (m_new / correct1) / ((v_new / correct2).sqrt() + eps);
            *p = T::from_f64(p.as_f64() - update);
        }
    }
    Ok(())
}
