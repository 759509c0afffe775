//! Strided 2-D convolution and its adjoint (transposed convolution).
//!
//! The fast path lowers each batch item to an im2col matrix and runs one GEMM.
//! Batch items are processed independently (optionally in parallel) and
//! per-item weight gradients are reduced in batch order, so results do not
//! depend on the thread count.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Geometry of a convolution layer.
///
/// For a transposed convolution `in_channels` are the channels of the
/// transposed layer's input and the weights are `in x out x kh x kw`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride_h: usize,
    pub stride_w: usize,
    pub pad_h: usize,
    pub pad_w: usize,
    pub has_bias: bool,
}

impl ConvSpec {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        pad: (usize, usize),
        has_bias: bool,
    ) -> Result<Self> {
        let spec = ConvSpec {
            in_channels,
            out_channels,
            kernel_h: kernel.0,
            kernel_w: kernel.1,
            stride_h: stride.0,
            stride_w: stride.1,
            pad_h: pad.0,
            pad_w: pad.1,
            has_bias,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Square kernel, square stride, square padding.
    pub fn square(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        has_bias: bool,
    ) -> Result<Self> {
        Self::new(
            in_channels,
            out_channels,
            (kernel, kernel),
            (stride, stride),
            (pad, pad),
            has_bias,
        )
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("in_channels", self.in_channels),
            ("out_channels", self.out_channels),
            ("kernel_h", self.kernel_h),
            ("kernel_w", self.kernel_w),
            ("stride_h", self.stride_h),
            ("stride_w", self.stride_w),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::InvalidSpec(format!("{name} must be positive")));
            }
        }
        Ok(())
    }

    /// Output extents of a plain convolution over an `height x width` input.
    pub fn output_extent(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        let out = |extent: usize, pad: usize, kernel: usize, stride: usize, axis: &str| {
            let padded = extent + 2 * pad;
            if padded < kernel {
                return Err(Error::InvalidSpec(format!(
                    "{axis}: kernel {kernel} exceeds padded extent {padded}"
                )));
            }
            Ok((padded - kernel) / stride + 1)
        };
        Ok((
            out(height, self.pad_h, self.kernel_h, self.stride_h, "height")?,
            out(width, self.pad_w, self.kernel_w, self.stride_w, "width")?,
        ))
    }

    /// Output extents of a transposed convolution (zero padding only).
    pub fn transposed_output_extent(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        if self.pad_h != 0 || self.pad_w != 0 {
            return Err(Error::InvalidSpec(
                "transposed convolution requires zero padding".into(),
            ));
        }
        if height == 0 || width == 0 {
            return Err(Error::InvalidSpec("empty transposed convolution input".into()));
        }
        Ok((
            (height - 1) * self.stride_h + self.kernel_h,
            (width - 1) * self.stride_w + self.kernel_w,
        ))
    }

    #[inline]
    fn patch_len(&self, channels: usize) -> usize {
        channels * self.kernel_h * self.kernel_w
    }
}

/// Gradients returned by the backward kernels.
#[derive(Debug, Clone)]
pub struct ConvGrads<T: Scalar> {
    pub input: Tensor<T>,
    pub weights: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

fn expect(dimension: &str, expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::shape(dimension, expected, actual));
    }
    Ok(())
}

fn check_bias<T: Scalar>(bias: Option<&Tensor<T>>, spec: &ConvSpec, channels: usize) -> Result<()> {
    match (bias, spec.has_bias) {
        (Some(b), true) => expect("bias length", channels, b.len()),
        (None, false) => Ok(()),
        (Some(_), false) => Err(Error::InvalidSpec("bias supplied but spec has none".into())),
        (None, true) => Err(Error::InvalidSpec("spec requires a bias".into())),
    }
}

/// Validates a plain convolution and returns its output extents.
pub(crate) fn check_conv<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    spec: &ConvSpec,
) -> Result<(usize, usize)> {
    spec.validate()?;
    expect("input channels", spec.in_channels, input.channels())?;
    let [wo, wi, wh, ww] = weights.shape();
    expect("weight output channels", spec.out_channels, wo)?;
    expect("weight input channels", spec.in_channels, wi)?;
    expect("weight kernel height", spec.kernel_h, wh)?;
    expect("weight kernel width", spec.kernel_w, ww)?;
    let (ho, wo) = spec.output_extent(input.height(), input.width())?;
    if ho == 0 || wo == 0 {
        return Err(Error::InvalidSpec("non-positive output extent".into()));
    }
    Ok((ho, wo))
}

/// Validates a transposed convolution and returns its output extents.
pub(crate) fn check_transposed<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    spec: &ConvSpec,
) -> Result<(usize, usize)> {
    spec.validate()?;
    expect("input channels", spec.in_channels, input.channels())?;
    let [wi, wo, wh, ww] = weights.shape();
    expect("weight input channels", spec.in_channels, wi)?;
    expect("weight output channels", spec.out_channels, wo)?;
    expect("weight kernel height", spec.kernel_h, wh)?;
    expect("weight kernel width", spec.kernel_w, ww)?;
    spec.transposed_output_extent(input.height(), input.width())
}

/// Lowers one `channels x height x width` item to a `(channels*kh*kw) x (ho*wo)` matrix.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(
    image: &[T],
    channels: usize,
    height: usize,
    width: usize,
    spec: &ConvSpec,
    ho: usize,
    wo: usize,
) -> Vec<T> {
    let cols_n = ho * wo;
    let mut cols = vec![T::zero(); spec.patch_len(channels) * cols_n];
    for c in 0..channels {
        let plane = &image[c * height * width..(c + 1) * height * width];
        for ki in 0..spec.kernel_h {
            for kj in 0..spec.kernel_w {
                let row = (c * spec.kernel_h + ki) * spec.kernel_w + kj;
                let dst = &mut cols[row * cols_n..(row + 1) * cols_n];
                for oh in 0..ho {
                    let ih = (oh * spec.stride_h + ki) as isize - spec.pad_h as isize;
                    if ih < 0 || ih >= height as isize {
                        continue;
                    }
                    let src = &plane[ih as usize * width..(ih as usize + 1) * width];
                    for ow in 0..wo {
                        let iw = (ow * spec.stride_w + kj) as isize - spec.pad_w as isize;
                        if iw >= 0 && iw < width as isize {
                            dst[oh * wo + ow] = src[iw as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-adds a column matrix back into a `channels x height x width` item.
#[allow(clippy::too_many_arguments)]
fn col2im<T: Scalar>(
    cols: &[T],
    channels: usize,
    height: usize,
    width: usize,
    spec: &ConvSpec,
    ho: usize,
    wo: usize,
    image: &mut [T],
) {
    let cols_n = ho * wo;
    for c in 0..channels {
        let plane = &mut image[c * height * width..(c + 1) * height * width];
        for ki in 0..spec.kernel_h {
            for kj in 0..spec.kernel_w {
                let row = (c * spec.kernel_h + ki) * spec.kernel_w + kj;
                let src = &cols[row * cols_n..(row + 1) * cols_n];
                for oh in 0..ho {
                    let ih = (oh * spec.stride_h + ki) as isize - spec.pad_h as isize;
                    if ih < 0 || ih >= height as isize {
                        continue;
                    }
                    let dst = &mut plane[ih as usize * width..(ih as usize + 1) * width];
                    for ow in 0..wo {
                        let iw = (ow * spec.stride_w + kj) as isize - spec.pad_w as isize;
                        if iw >= 0 && iw < width as isize {
                            dst[iw as usize] = dst[iw as usize] + src[oh * wo + ow];
                        }
                    }
                }
            }
        }
    }
}

fn add_channel_bias<T: Scalar>(out: &mut [T], bias: Option<&Tensor<T>>, plane: usize) {
    if let Some(b) = bias {
        for (row, &bv) in out.chunks_mut(plane).zip(b.data()) {
            for v in row {
                *v = *v + bv;
            }
        }
    }
}

fn channel_sums<T: Scalar>(grad: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = grad.shape();
    let mut sums = vec![T::zero(); c];
    for item in 0..n {
        for (ch, sum) in sums.iter_mut().enumerate() {
            let start = (item * c + ch) * h * w;
            for &g in &grad.data()[start..start + h * w] {
                *sum = *sum + g;
            }
        }
    }
    Tensor::from_vec([1, c, 1, 1], sums).expect("bias gradient shape")
}

fn sum_in_order<T: Scalar>(parts: Vec<Vec<T>>, len: usize) -> Vec<T> {
    let mut total = vec![T::zero(); len];
    for part in parts {
        for (t, p) in total.iter_mut().zip(part) {
            *t = *t + p;
        }
    }
    total
}

/// Plain strided convolution, im2col + GEMM.
pub fn conv2d_forward<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    let (ho, wo) = check_conv(input, weights, spec)?;
    check_bias(bias, spec, spec.out_channels)?;
    let [n, c, h, w] = input.shape();
    let k = spec.patch_len(c);
    let plane = ho * wo;
    let items: Vec<Vec<T>> = (0..n)
        .into_par_iter()
        .map(|item| {
            let cols = im2col(input.sample(item), c, h, w, spec, ho, wo);
            let mut out = vec![T::zero(); spec.out_channels * plane];
            T::gemm(
                spec.out_channels,
                k,
                plane,
                weights.data(),
                (k as isize, 1),
                &cols,
                (plane as isize, 1),
                T::zero(),
                &mut out,
                (plane as isize, 1),
            );
            add_channel_bias(&mut out, bias, plane);
            out
        })
        .collect();
    Tensor::from_vec([n, spec.out_channels, ho, wo], items.concat())
}

/// Gradients of `sum(grad_output * conv2d_forward(input, weights, bias))`.
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    spec: &ConvSpec,
    grad_output: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    let (ho, wo) = check_conv(input, weights, spec)?;
    let [n, c, h, w] = input.shape();
    grad_output.ensure_same_shape(
        &Tensor::zeros([n, spec.out_channels, ho, wo]),
        "grad_output",
    )?;
    let k = spec.patch_len(c);
    let plane = ho * wo;
    let parts: Vec<(Vec<T>, Vec<T>)> = (0..n)
        .into_par_iter()
        .map(|item| {
            let cols = im2col(input.sample(item), c, h, w, spec, ho, wo);
            let gout = grad_output.sample(item);
            let mut gw = vec![T::zero(); spec.out_channels * k];
            // gw = gout * cols^T
            T::gemm(
                spec.out_channels,
                plane,
                k,
                gout,
                (plane as isize, 1),
                &cols,
                (1, plane as isize),
                T::zero(),
                &mut gw,
                (k as isize, 1),
            );
            // gcols = W^T * gout
            let mut gcols = vec![T::zero(); k * plane];
            T::gemm(
                k,
                spec.out_channels,
                plane,
                weights.data(),
                (1, k as isize),
                gout,
                (plane as isize, 1),
                T::zero(),
                &mut gcols,
                (plane as isize, 1),
            );
            let mut gin = vec![T::zero(); c * h * w];
            col2im(&gcols, c, h, w, spec, ho, wo, &mut gin);
            (gin, gw)
        })
        .collect();
    let (gins, gws): (Vec<_>, Vec<_>) = parts.into_iter().unzip();
    Ok(ConvGrads {
        input: Tensor::from_vec(input.shape(), gins.concat())?,
        weights: Tensor::from_vec(weights.shape(), sum_in_order(gws, weights.len()))?,
        bias: spec.has_bias.then(|| channel_sums(grad_output)),
    })
}

/// Transposed convolution: the adjoint of [`conv2d_forward`] with the same spec.
///
/// Each input value scatters its kernel-weighted contribution into the output.
pub fn convtranspose2d_forward<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    let (ho, wo) = check_transposed(input, weights, spec)?;
    check_bias(bias, spec, spec.out_channels)?;
    let [n, cin, h, w] = input.shape();
    let cout = spec.out_channels;
    let k = spec.patch_len(cout);
    let positions = h * w;
    let items: Vec<Vec<T>> = (0..n)
        .into_par_iter()
        .map(|item| {
            // cols = W^T * x, W viewed as cin x (cout*kh*kw)
            let mut cols = vec![T::zero(); k * positions];
            T::gemm(
                k,
                cin,
                positions,
                weights.data(),
                (1, k as isize),
                input.sample(item),
                (positions as isize, 1),
                T::zero(),
                &mut cols,
                (positions as isize, 1),
            );
            let mut out = vec![T::zero(); cout * ho * wo];
            col2im(&cols, cout, ho, wo, spec, h, w, &mut out);
            add_channel_bias(&mut out, bias, ho * wo);
            out
        })
        .collect();
    Tensor::from_vec([n, cout, ho, wo], items.concat())
}

/// Gradients of `sum(grad_output * convtranspose2d_forward(input, weights, bias))`.
pub fn convtranspose2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    spec: &ConvSpec,
    grad_output: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    let (ho, wo) = check_transposed(input, weights, spec)?;
    let [n, cin, h, w] = input.shape();
    let cout = spec.out_channels;
    grad_output.ensure_same_shape(&Tensor::zeros([n, cout, ho, wo]), "grad_output")?;
    let k = spec.patch_len(cout);
    let positions = h * w;
    let parts: Vec<(Vec<T>, Vec<T>)> = (0..n)
        .into_par_iter()
        .map(|item| {
            let gcols = im2col(grad_output.sample(item), cout, ho, wo, spec, h, w);
            let x = input.sample(item);
            let mut gin = vec![T::zero(); cin * positions];
            T::gemm(
                cin,
                k,
                positions,
                weights.data(),
                (k as isize, 1),
                &gcols,
                (positions as isize, 1),
                T::zero(),
                &mut gin,
                (positions as isize, 1),
            );
            let mut gw = vec![T::zero(); cin * k];
            T::gemm(
                cin,
                positions,
                k,
                x,
                (positions as isize, 1),
                &gcols,
                (1, positions as isize),
                T::zero(),
                &mut gw,
                (k as isize, 1),
            );
            (gin, gw)
        })
        .collect();
    let (gins, gws): (Vec<_>, Vec<_>) = parts.into_iter().unzip();
    Ok(ConvGrads {
        input: Tensor::from_vec(input.shape(), gins.concat())?,
        weights: Tensor::from_vec(weights.shape(), sum_in_order(gws, weights.len()))?,
        bias: spec.has_bias.then(|| channel_sums(grad_output)),
    })
}

/// Naive nested-loop kernels used as oracles for the GEMM path.
pub mod reference {
    use super::*;

    /// Direct 7-loop convolution, accumulating row-major over the receptive field.
    pub fn conv2d_naive<T: Scalar>(
        input: &Tensor<T>,
        weights: &Tensor<T>,
        bias: Option<&Tensor<T>>,
        spec: &ConvSpec,
    ) -> Result<Tensor<T>> {
        let (ho, wo) = check_conv(input, weights, spec)?;
        check_bias(bias, spec, spec.out_channels)?;
        let [n, cin, h, w] = input.shape();
        let mut out = Tensor::zeros([n, spec.out_channels, ho, wo]);
        for b in 0..n {
            for co in 0..spec.out_channels {
                for oh in 0..ho {
                    for ow in 0..wo {
                        let mut acc = bias.map_or(T::zero(), |bv| bv.data()[co]);
                        for ci in 0..cin {
                            for ki in 0..spec.kernel_h {
                                for kj in 0..spec.kernel_w {
                                    let ih = (oh * spec.stride_h + ki) as isize
                                        - spec.pad_h as isize;
                                    let iw = (ow * spec.stride_w + kj) as isize
                                        - spec.pad_w as isize;
                                    if ih < 0 || iw < 0 || ih >= h as isize || iw >= w as isize {
                                        continue;
                                    }
                                    acc = acc
                                        + weights.at(co, ci, ki, kj)
                                            * input.at(b, ci, ih as usize, iw as usize);
                                }
                            }
                        }
                        out.set(b, co, oh, ow, acc);
                    }
                }
            }
        }
        Ok(out)
    }

    /// Direct scatter form of the transposed convolution.
    pub fn convtranspose2d_naive<T: Scalar>(
        input: &Tensor<T>,
        weights: &Tensor<T>,
        bias: Option<&Tensor<T>>,
        spec: &ConvSpec,
    ) -> Result<Tensor<T>> {
        let (ho, wo) = check_transposed(input, weights, spec)?;
        check_bias(bias, spec, spec.out_channels)?;
        let [n, cin, h, w] = input.shape();
        let cout = spec.out_channels;
        let mut out = Tensor::zeros([n, cout, ho, wo]);
        for b in 0..n {
            for ci in 0..cin {
                for ih in 0..h {
                    for iw in 0..w {
                        let x = input.at(b, ci, ih, iw);
                        for co in 0..cout {
                            for ki in 0..spec.kernel_h {
                                for kj in 0..spec.kernel_w {
                                    let oh = ih * spec.stride_h + ki;
                                    let ow = iw * spec.stride_w + kj;
                                    let v = out.at(b, co, oh, ow) + x * weights.at(ci, co, ki, kj);
                                    out.set(b, co, oh, ow, v);
                                }
                            }
                        }
                    }
                }
            }
        }
        if let Some(bv) = bias {
            for b in 0..n {
                for co in 0..cout {
                    for oh in 0..ho {
                        for ow in 0..wo {
                            let v = out.at(b, co, oh, ow) + bv.data()[co];
                            out.set(b, co, oh, ow, v);
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}
