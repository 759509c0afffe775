use super::{assign_param, CsModel, Initializer, MeasurementOp, Method, ModelConfig};
use crate::error::{Error, Result};
use crate::kernels::mse_loss;
use crate::tensor::{Scalar, Tensor};

/// Block-by-block reconstruction: one shared affine map from each block's
/// measurement vector to its `B x B` pixels.
///
/// Blocks never see each other, which is what produces visible seams.
#[derive(Debug, Clone, PartialEq)]
pub struct BaselineBlockNet<T: Scalar> {
    block_size: usize,
    /// `B^2 x M` matrix stored as `1 x 1 x B^2 x M`.
    pub weight: Tensor<T>,
    /// `B^2` offsets stored as `1 x 1 x 1 x B^2`.
    pub bias: Tensor<T>,
}

impl<T: Scalar> BaselineBlockNet<T> {
    pub fn new(block_size: usize, weight: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        let p = block_size * block_size;
        let [one_a, one_b, rows, _] = weight.shape();
        if one_a != 1 || one_b != 1 || rows != p {
            return Err(Error::shape("baseline weight rows", p, rows));
        }
        if bias.len() != p {
            return Err(Error::shape("baseline bias length", p, bias.len()));
        }
        Ok(BaselineBlockNet {
            block_size,
            weight,
            bias: Tensor::from_vec([1, 1, 1, p], bias.into_vec())?,
        })
    }

    /// Weight matrix that inverts [`MeasurementOp::one_hot`] exactly.
    pub fn identity(block_size: usize) -> Result<Self> {
        let p = block_size * block_size;
        let weight = Tensor::from_fn([1, 1, p, p], |[_, _, r, c]| if r == c { T::one() } else { T::zero() });
        Self::new(block_size, weight, Tensor::zeros([1, 1, 1, p]))
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    pub fn measurements(&self) -> usize {
        self.weight.width()
    }

    fn check(&self, measurements: &Tensor<T>) -> Result<()> {
        if measurements.channels() != self.measurements() {
            return Err(Error::shape(
                "measurement channels",
                self.measurements(),
                measurements.channels(),
            ));
        }
        Ok(())
    }

    /// Reconstructs each block from its own measurement column and tiles the result.
    pub fn reconstruct(&self, measurements: &Tensor<T>) -> Result<Tensor<T>> {
        self.check(measurements)?;
        let [n, m, bh, bw] = measurements.shape();
        let b = self.block_size;
        let w = self.weight.data();
        let bias = self.bias.data();
        let mut out = Tensor::zeros([n, 1, bh * b, bw * b]);
        let mut column = vec![T::zero(); m];
        for item in 0..n {
            for i in 0..bh {
                for j in 0..bw {
                    for (k, slot) in column.iter_mut().enumerate() {
                        *slot = measurements.at(item, k, i, j);
                    }
                    for u in 0..b {
                        for v in 0..b {
                            let p = u * b + v;
                            let row = &w[p * m..(p + 1) * m];
                            let mut acc = bias[p];
                            for (wv, yv) in row.iter().zip(&column) {
                                acc = acc + *wv * *yv;
                            }
                            out.set(item, 0, i * b + u, j * b + v, acc);
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// Returns `(grad_measurements, [grad_weight, grad_bias])`.
    pub(crate) fn backward(
        &self,
        measurements: &Tensor<T>,
        grad_image: &Tensor<T>,
    ) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
        self.check(measurements)?;
        let [n, m, bh, bw] = measurements.shape();
        let b = self.block_size;
        grad_image.ensure_same_shape(&Tensor::zeros([n, 1, bh * b, bw * b]), "baseline grad")?;
        let w = self.weight.data();
        let mut grad_meas = Tensor::zeros(measurements.shape());
        let mut grad_w = Tensor::zeros(self.weight.shape());
        let mut grad_b = Tensor::zeros(self.bias.shape());
        for item in 0..n {
            for i in 0..bh {
                for j in 0..bw {
                    for u in 0..b {
                        for v in 0..b {
                            let p = u * b + v;
                            let g = grad_image.at(item, 0, i * b + u, j * b + v);
                            grad_b.data_mut()[p] = grad_b.data()[p] + g;
                            for k in 0..m {
                                let y = measurements.at(item, k, i, j);
                                let gw = &mut grad_w.data_mut()[p * m + k];
                                *gw = *gw + g * y;
                                let gm = grad_meas.at(item, k, i, j) + w[p * m + k] * g;
                                grad_meas.set(item, k, i, j, gm);
                            }
                        }
                    }
                }
            }
        }
        Ok((grad_meas, vec![grad_w, grad_b]))
    }
}

/// Learned block measurement followed by independent per-block reconstruction.
#[derive(Debug, Clone, PartialEq)]
pub struct BaselineModel<T: Scalar> {
    config: ModelConfig,
    pub measurement: MeasurementOp<T>,
    pub net: BaselineBlockNet<T>,
}

impl<T: Scalar> BaselineModel<T> {
    /// Same measurement initialization as the full model for a given seed.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut init = Initializer::new(seed);
        let b = config.block_size;
        let m = config.measurements();
        let measurement = MeasurementOp::new(init.he_uniform([m, 1, b, b], b * b))?;
        let net = BaselineBlockNet::new(b, init.he_uniform([1, 1, b * b, m], m), Tensor::zeros([1, 1, 1, b * b]))?;
        Ok(BaselineModel {
            config,
            measurement,
            net,
        })
    }

    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let b = config.block_size;
        let m = config.measurements();
        Ok(BaselineModel {
            config,
            measurement: MeasurementOp::new(Tensor::zeros([m, 1, b, b]))?,
            net: BaselineBlockNet::new(b, Tensor::zeros([1, 1, b * b, m]), Tensor::zeros([1, 1, 1, b * b]))?,
        })
    }

    /// Assembles a model from explicit parts; the config must agree with them.
    pub fn from_parts(
        config: ModelConfig,
        measurement: MeasurementOp<T>,
        net: BaselineBlockNet<T>,
    ) -> Result<Self> {
        config.validate()?;
        if measurement.measurements() != config.measurements() || net.measurements() != config.measurements() {
            return Err(Error::shape(
                "measurement count",
                config.measurements(),
                measurement.measurements(),
            ));
        }
        if measurement.block_size() != config.block_size || net.block_size() != config.block_size {
            return Err(Error::shape("block size", config.block_size, measurement.block_size()));
        }
        Ok(BaselineModel {
            config,
            measurement,
            net,
        })
    }

    pub fn load_params<'a>(
        &mut self,
        mut lookup: impl FnMut(&str) -> Option<&'a Tensor<T>>,
    ) -> Result<()> {
        let names: Vec<String> = self.named_params().into_iter().map(|(n, _)| n).collect();
        for (name, target) in names.iter().zip(self.params_mut()) {
            let source = lookup(name).ok_or_else(|| Error::checkpoint(name, "missing"))?;
            assign_param(name, target, source)?;
        }
        Ok(())
    }
}

impl<T: Scalar> CsModel<T> for BaselineModel<T> {
    fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn method(&self) -> Method {
        Method::Baseline
    }

    fn measurement(&self) -> &MeasurementOp<T> {
        &self.measurement
    }

    fn reconstruct(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        self.net.reconstruct(&self.measurement.measure(images)?)
    }

    fn loss_and_grads(&self, images: &Tensor<T>) -> Result<(T, Vec<Tensor<T>>)> {
        let measurements = self.measurement.measure(images)?;
        let recon = self.net.reconstruct(&measurements)?;
        let (loss, grad) = mse_loss(&recon, images)?;
        let (grad_meas, net_grads) = self.net.backward(&measurements, &grad)?;
        let mut grads = vec![self.measurement.backward(images, &grad_meas)?];
        grads.extend(net_grads);
        Ok((loss, grads))
    }

    fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        vec![
            ("measure.weight".to_string(), self.measurement.weights()),
            ("baseline.weight".to_string(), &self.net.weight),
            ("baseline.bias".to_string(), &self.net.bias),
        ]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        vec![
            self.measurement.weights_mut(),
            &mut self.net.weight,
            &mut self.net.bias,
        ]
    }
}
