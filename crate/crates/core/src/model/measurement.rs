use crate::error::{Error, Result};
use crate::kernels::{conv2d_backward, conv2d_forward, ConvSpec};
use crate::tensor::{Scalar, Tensor};

/// Learned block measurement: `M` kernels of size `B x B` applied at stride `B`.
///
/// Together the kernels form the `M x B^2` measurement matrix; each
/// non-overlapping block of the image is projected onto them independently.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementOp<T: Scalar> {
    weights: Tensor<T>,
}

impl<T: Scalar> MeasurementOp<T> {
    /// Wraps an `M x 1 x B x B` weight tensor.
    pub fn new(weights: Tensor<T>) -> Result<Self> {
        let [m, c, bh, bw] = weights.shape();
        if c != 1 {
            return Err(Error::shape("measurement kernel channels", 1, c));
        }
        if bh != bw {
            return Err(Error::shape("measurement kernel width", bh, bw));
        }
        if bh < 2 || m == 0 {
            return Err(Error::Config(format!(
                "measurement needs B >= 2 and M >= 1, got B={bh}, M={m}"
            )));
        }
        Ok(MeasurementOp { weights })
    }

    /// The `M = B^2` operator that reads each pixel of a block into its own channel.
    pub fn one_hot(block: usize) -> Result<Self> {
        let p = block * block;
        Self::new(Tensor::from_fn([p, 1, block, block], |[m, _, u, v]| {
            if u * block + v == m {
                T::one()
            } else {
                T::zero()
            }
        }))
    }

    pub fn block_size(&self) -> usize {
        self.weights.height()
    }

    pub fn measurements(&self) -> usize {
        self.weights.batch()
    }

    pub fn weights(&self) -> &Tensor<T> {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut Tensor<T> {
        &mut self.weights
    }

    pub fn spec(&self) -> ConvSpec {
        let b = self.block_size();
        ConvSpec::square(1, self.measurements(), b, b, 0, false).expect("valid measurement spec")
    }

    fn check_image(&self, image: &Tensor<T>) -> Result<()> {
        if image.channels() != 1 {
            return Err(Error::shape("image channels", 1, image.channels()));
        }
        let b = self.block_size();
        for (axis, extent) in [("height", image.height()), ("width", image.width())] {
            if extent == 0 || extent % b != 0 {
                return Err(Error::NotDivisible {
                    axis,
                    extent,
                    block: b,
                });
            }
        }
        Ok(())
    }

    /// `N x 1 x H x W` image to `N x M x H/B x W/B` measurements.
    pub fn measure(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_image(image)?;
        conv2d_forward(image, &self.weights, None, &self.spec())
    }

    /// Gradient with respect to the measurement kernels.
    pub fn backward(&self, image: &Tensor<T>, grad_measurements: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_image(image)?;
        Ok(conv2d_backward(image, &self.weights, &self.spec(), grad_measurements)?.weights)
    }

    /// The `M x B^2` matrix as CSV, row `i` being kernel `i` flattened row-major.
    pub fn to_matrix_csv(&self) -> String {
        let p = self.block_size() * self.block_size();
        let mut out = String::new();
        for row in self.weights.data().chunks(p) {
            let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }

    /// Parses the CSV written by [`MeasurementOp::to_matrix_csv`].
    pub fn from_matrix_csv(text: &str) -> Result<Self> {
        let mut values = Vec::new();
        let mut width = None;
        let mut rows = 0;
        for (line_no, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let row: Vec<f64> = line
                .split(',')
                .map(|cell| {
                    cell.trim().parse::<f64>().map_err(|e| {
                        Error::Config(format!("matrix line {}: {e}", line_no + 1))
                    })
                })
                .collect::<Result<_>>()?;
            match width {
                None => width = Some(row.len()),
                Some(w) if w != row.len() => {
                    return Err(Error::shape(format!("matrix line {} columns", line_no + 1), w, row.len()))
                }
                _ => {}
            }
            values.extend(row.into_iter().map(T::from_f64));
            rows += 1;
        }
        let p = width.ok_or_else(|| Error::Config("empty measurement matrix".into()))?;
        let block = (p as f64).sqrt().round() as usize;
        if block * block != p {
            return Err(Error::Config(format!(
                "matrix has {p} columns, which is not a square block"
            )));
        }
        Self::new(Tensor::from_vec([rows, 1, block, block], values)?)
    }
}
