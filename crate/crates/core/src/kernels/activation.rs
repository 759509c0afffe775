//! Parametric ReLU with one learned slope per channel.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

fn check_slope<T: Scalar>(input: &Tensor<T>, slope: &[T]) -> Result<()> {
    if slope.len() != input.channels() {
        return Err(Error::shape("prelu slope length", input.channels(), slope.len()));
    }
    Ok(())
}

fn for_each_channel<T: Scalar>(shape: [usize; 4], mut f: impl FnMut(usize, std::ops::Range<usize>)) {
    let [n, c, h, w] = shape;
    let plane = h * w;
    for item in 0..n {
        for ch in 0..c {
            let start = (item * c + ch) * plane;
            f(ch, start..start + plane);
        }
    }
}

pub fn prelu_forward<T: Scalar>(input: &Tensor<T>, slope: &[T]) -> Result<Tensor<T>> {
    check_slope(input, slope)?;
    let mut out = input.clone();
    for_each_channel::<T>(input.shape(), |ch, range| {
        let a = slope[ch];
        for v in &mut out.data_mut()[range] {
            if *v < T::zero() {
                *v = a * *v;
            }
        }
    });
    Ok(out)
}

/// Returns `(grad_input, grad_slope)`. At exactly zero the non-negative branch is used.
pub fn prelu_backward<T: Scalar>(
    input: &Tensor<T>,
    slope: &[T],
    grad_output: &Tensor<T>,
) -> Result<(Tensor<T>, Vec<T>)> {
    check_slope(input, slope)?;
    input.ensure_same_shape(grad_output, "prelu grad_output")?;
    let mut grad_input = grad_output.clone();
    let mut grad_slope = vec![T::zero(); slope.len()];
    let x = input.data();
    for_each_channel::<T>(input.shape(), |ch, range| {
        let a = slope[ch];
        let gi = &mut grad_input.data_mut()[range.clone()];
        for (g, &xv) in gi.iter_mut().zip(&x[range]) {
            if xv < T::zero() {
                grad_slope[ch] = grad_slope[ch] + xv * *g;
                *g = a * *g;
            }
        }
    });
    Ok((grad_input, grad_slope))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn positive_input_passes_through() {
        let x = Tensor::<f32>::from_vec([1, 2, 1, 2], vec![1.0, 2.0, 0.5, 0.0]).unwrap();
        let y = prelu_forward(&x, &[0.25, 0.1]).unwrap();
        assert_eq!(y, x);
        let g = Tensor::from_vec([1, 2, 1, 2], vec![1.0, -1.0, 2.0, 3.0]).unwrap();
        let (gi, gs) = prelu_backward(&x, &[0.25, 0.1], &g).unwrap();
        assert_eq!(gi, g);
        assert_eq!(gs, vec![0.0, 0.0]);
    }

    #[test]
    fn negative_input_is_scaled() {
        let x = Tensor::<f32>::filled([1, 1, 1, 1], -2.0);
        assert_eq!(prelu_forward(&x, &[0.25]).unwrap().data(), &[-0.5]);
    }

    #[test]
    fn zero_slope_is_relu() {
        let x = Tensor::<f32>::from_vec([1, 1, 1, 4], vec![-3.0, -0.1, 0.0, 2.0]).unwrap();
        let y = prelu_forward(&x, &[0.0]).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0, 0.0, 2.0]);
    }

    #[test]
    fn zero_cotangent() {
        let x = Tensor::<f64>::from_vec([1, 1, 1, 3], vec![-1.0, 0.0, 1.0]).unwrap();
        let (gi, gs) = prelu_backward(&x, &[0.3], &Tensor::zeros([1, 1, 1, 3])).unwrap();
        assert_eq!(gi.max_abs(), 0.0);
        assert_eq!(gs, vec![0.0]);
    }

    #[test]
    fn kink_uses_non_negative_branch() {
        let x = Tensor::<f64>::zeros([1, 1, 1, 1]);
        let g = Tensor::filled([1, 1, 1, 1], 2.0);
        let (gi, gs) = prelu_backward(&x, &[0.25], &g).unwrap();
        assert_eq!(gi.data(), &[2.0]);
        assert_eq!(gs, vec![0.0]);
    }

    #[test]
    fn slope_length_checked() {
        let x = Tensor::<f32>::zeros([1, 3, 2, 2]);
        assert!(prelu_forward(&x, &[0.25; 2]).is_err());
    }
}
