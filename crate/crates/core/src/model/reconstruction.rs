use super::{assign_param, CsModel, Initializer, MeasurementOp, Method, ModelConfig};
use crate::error::{Error, Result};
use crate::kernels::{
    conv2d_backward, conv2d_forward, convtranspose2d_backward, convtranspose2d_forward,
    mse_loss, prelu_backward, prelu_forward, ConvSpec,
};
use crate::tensor::{Scalar, Tensor};

const PRELU_INIT: f64 = 0.25;

/// Two 3x3 convolutions around a PReLU, added to an identity skip path.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualBlock<T: Scalar> {
    pub conv1_weight: Tensor<T>,
    pub conv1_bias: Tensor<T>,
    pub slope: Tensor<T>,
    pub conv2_weight: Tensor<T>,
    pub conv2_bias: Tensor<T>,
}

/// Full-image reconstruction from block measurements.
///
/// A stride-`B` transposed convolution scatters every measurement vector
/// into its block, then a stack of 3x3 convolutions refines the whole image
/// at once, so neighbouring blocks inform each other.
#[derive(Debug, Clone, PartialEq)]
pub struct ReconstructionNet<T: Scalar> {
    block_size: usize,
    pub initial_weight: Tensor<T>,
    pub lift_weight: Tensor<T>,
    pub lift_bias: Tensor<T>,
    pub lift_slope: Tensor<T>,
    pub blocks: Vec<ResidualBlock<T>>,
    pub head_weight: Tensor<T>,
    pub head_bias: Tensor<T>,
}

/// Activations kept from the forward pass for backpropagation.
pub(crate) struct ReconCache<T: Scalar> {
    measurements: Tensor<T>,
    initial: Tensor<T>,
    lift_pre: Tensor<T>,
    block_inputs: Vec<Tensor<T>>,
    block_pre: Vec<Tensor<T>>,
    block_act: Vec<Tensor<T>>,
    trunk: Tensor<T>,
}

fn conv3x3(cin: usize, cout: usize) -> ConvSpec {
    ConvSpec::square(cin, cout, 3, 1, 1, true).expect("valid 3x3 spec")
}

impl<T: Scalar> ReconstructionNet<T> {
    fn with(config: &ModelConfig, mut weights: impl FnMut([usize; 4], usize) -> Tensor<T>) -> Self {
        let b = config.block_size;
        let m = config.measurements();
        let c = config.lift_channels;
        let initial_weight = weights([m, 1, b, b], m);
        let lift_weight = weights([c, 1, 3, 3], 9);
        let blocks = (0..config.residual_blocks)
            .map(|_| ResidualBlock {
                conv1_weight: weights([c, c, 3, 3], 9 * c),
                conv1_bias: Tensor::zeros([1, c, 1, 1]),
                slope: Tensor::filled([1, c, 1, 1], T::from_f64(PRELU_INIT)),
                conv2_weight: weights([c, c, 3, 3], 9 * c),
                conv2_bias: Tensor::zeros([1, c, 1, 1]),
            })
            .collect();
        let head_weight = weights([1, c, 3, 3], 9 * c);
        ReconstructionNet {
            block_size: b,
            initial_weight,
            lift_weight,
            lift_bias: Tensor::zeros([1, c, 1, 1]),
            lift_slope: Tensor::filled([1, c, 1, 1], T::from_f64(PRELU_INIT)),
            blocks,
            head_weight,
            head_bias: Tensor::zeros([1, 1, 1, 1]),
        }
    }

    pub fn zeros(config: &ModelConfig) -> Self {
        Self::with(config, |shape, _| Tensor::zeros(shape))
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    pub fn measurements(&self) -> usize {
        self.initial_weight.batch()
    }

    pub fn channels(&self) -> usize {
        self.lift_weight.batch()
    }

    fn initial_spec(&self) -> ConvSpec {
        let b = self.block_size;
        ConvSpec::square(self.measurements(), 1, b, b, 0, false).expect("valid initial spec")
    }

    /// `N x M x h x w` measurements to an `N x 1 x hB x wB` image.
    pub fn reconstruct(&self, measurements: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward(measurements)?.0)
    }

    pub(crate) fn forward(&self, measurements: &Tensor<T>) -> Result<(Tensor<T>, ReconCache<T>)> {
        if measurements.channels() != self.measurements() {
            return Err(Error::shape(
                "measurement channels",
                self.measurements(),
                measurements.channels(),
            ));
        }
        let c = self.channels();
        let initial = convtranspose2d_forward(
            measurements,
            &self.initial_weight,
            None,
            &self.initial_spec(),
        )?;
        let lift_pre = conv2d_forward(&initial, &self.lift_weight, Some(&self.lift_bias), &conv3x3(1, c))?;
        let mut h = prelu_forward(&lift_pre, self.lift_slope.data())?;
        let mut block_inputs = Vec::with_capacity(self.blocks.len());
        let mut block_pre = Vec::with_capacity(self.blocks.len());
        let mut block_act = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let pre = conv2d_forward(&h, &block.conv1_weight, Some(&block.conv1_bias), &conv3x3(c, c))?;
            let act = prelu_forward(&pre, block.slope.data())?;
            let mut out =
                conv2d_forward(&act, &block.conv2_weight, Some(&block.conv2_bias), &conv3x3(c, c))?;
            out.add_assign(&h)?;
            block_inputs.push(h);
            block_pre.push(pre);
            block_act.push(act);
            h = out;
        }
        let image = conv2d_forward(&h, &self.head_weight, Some(&self.head_bias), &conv3x3(c, 1))?;
        Ok((
            image,
            ReconCache {
                measurements: measurements.clone(),
                initial,
                lift_pre,
                block_inputs,
                block_pre,
                block_act,
                trunk: h,
            },
        ))
    }

    /// Returns the measurement gradient and parameter gradients in
    /// [`ReconstructionNet::named_params`] order.
    pub(crate) fn backward(
        &self,
        cache: &ReconCache<T>,
        grad_image: &Tensor<T>,
    ) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
        let c = self.channels();
        let head = conv2d_backward(&cache.trunk, &self.head_weight, &conv3x3(c, 1), grad_image)?;
        let mut grad_h = head.input;
        let mut block_grads = Vec::with_capacity(self.blocks.len());
        for (i, block) in self.blocks.iter().enumerate().rev() {
            let conv2 = conv2d_backward(&cache.block_act[i], &block.conv2_weight, &conv3x3(c, c), &grad_h)?;
            let (grad_pre, grad_slope) = prelu_backward(&cache.block_pre[i], block.slope.data(), &conv2.input)?;
            let conv1 = conv2d_backward(&cache.block_inputs[i], &block.conv1_weight, &conv3x3(c, c), &grad_pre)?;
            grad_h.add_assign(&conv1.input)?;
            block_grads.push([
                conv1.weights,
                conv1.bias.expect("conv1 has bias"),
                Tensor::from_vec([1, c, 1, 1], grad_slope)?,
                conv2.weights,
                conv2.bias.expect("conv2 has bias"),
            ]);
        }
        block_grads.reverse();
        let (grad_lift_pre, grad_lift_slope) =
            prelu_backward(&cache.lift_pre, self.lift_slope.data(), &grad_h)?;
        let lift = conv2d_backward(&cache.initial, &self.lift_weight, &conv3x3(1, c), &grad_lift_pre)?;
        let initial = convtranspose2d_backward(
            &cache.measurements,
            &self.initial_weight,
            &self.initial_spec(),
            &lift.input,
        )?;

        let mut grads = vec![
            initial.weights,
            lift.weights,
            lift.bias.expect("lift has bias"),
            Tensor::from_vec([1, c, 1, 1], grad_lift_slope)?,
        ];
        grads.extend(block_grads.into_iter().flatten());
        grads.push(head.weights);
        grads.push(head.bias.expect("head has bias"));
        Ok((initial.input, grads))
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![
            ("recon.initial.weight".to_string(), &self.initial_weight),
            ("recon.lift.weight".to_string(), &self.lift_weight),
            ("recon.lift.bias".to_string(), &self.lift_bias),
            ("recon.lift.slope".to_string(), &self.lift_slope),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("recon.block{i}.conv1.weight"), &b.conv1_weight));
            out.push((format!("recon.block{i}.conv1.bias"), &b.conv1_bias));
            out.push((format!("recon.block{i}.slope"), &b.slope));
            out.push((format!("recon.block{i}.conv2.weight"), &b.conv2_weight));
            out.push((format!("recon.block{i}.conv2.bias"), &b.conv2_bias));
        }
        out.push(("recon.head.weight".to_string(), &self.head_weight));
        out.push(("recon.head.bias".to_string(), &self.head_bias));
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = vec![
            &mut self.initial_weight,
            &mut self.lift_weight,
            &mut self.lift_bias,
            &mut self.lift_slope,
        ];
        for b in &mut self.blocks {
            out.push(&mut b.conv1_weight);
            out.push(&mut b.conv1_bias);
            out.push(&mut b.slope);
            out.push(&mut b.conv2_weight);
            out.push(&mut b.conv2_bias);
        }
        out.push(&mut self.head_weight);
        out.push(&mut self.head_bias);
        out
    }
}

/// Seeded initial parameters for the measurement operator and the
/// reconstruction network. Biases start at zero and PReLU slopes at 0.25.
pub fn init_model<T: Scalar>(
    config: &ModelConfig,
    seed: u64,
) -> Result<(MeasurementOp<T>, ReconstructionNet<T>)> {
    config.validate()?;
    let mut init = Initializer::new(seed);
    let b = config.block_size;
    let measurement = MeasurementOp::new(init.he_uniform([config.measurements(), 1, b, b], b * b))?;
    let net = ReconstructionNet::with(config, |shape, fan_in| init.he_uniform(shape, fan_in));
    Ok((measurement, net))
}

/// Learned block measurement followed by full-image reconstruction.
#[derive(Debug, Clone, PartialEq)]
pub struct FullModel<T: Scalar> {
    config: ModelConfig,
    pub measurement: MeasurementOp<T>,
    pub net: ReconstructionNet<T>,
}

impl<T: Scalar> FullModel<T> {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let (measurement, net) = init_model(&config, seed)?;
        Ok(FullModel {
            config,
            measurement,
            net,
        })
    }

    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let b = config.block_size;
        Ok(FullModel {
            config,
            measurement: MeasurementOp::new(Tensor::zeros([config.measurements(), 1, b, b]))?,
            net: ReconstructionNet::zeros(&config),
        })
    }

    /// Replaces every parameter from `(name, tensor)` pairs, checking shapes.
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

impl<T: Scalar> CsModel<T> for FullModel<T> {
    fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn method(&self) -> Method {
        Method::Full
    }

    fn measurement(&self) -> &MeasurementOp<T> {
        &self.measurement
    }

    fn reconstruct(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        self.net.reconstruct(&self.measurement.measure(images)?)
    }

    fn loss_and_grads(&self, images: &Tensor<T>) -> Result<(T, Vec<Tensor<T>>)> {
        let measurements = self.measurement.measure(images)?;
        let (recon, cache) = self.net.forward(&measurements)?;
        let (loss, grad) = mse_loss(&recon, images)?;
        let (grad_meas, net_grads) = self.net.backward(&cache, &grad)?;
        let mut grads = Vec::with_capacity(net_grads.len() + 1);
        grads.push(self.measurement.backward(images, &grad_meas)?);
        grads.extend(net_grads);
        Ok((loss, grads))
    }

    fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![("measure.weight".to_string(), self.measurement.weights())];
        out.extend(self.net.named_params());
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = vec![self.measurement.weights_mut()];
        out.extend(self.net.params_mut());
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::random_tensor;
    use rand_chacha::ChaCha8Rng;
    use rand_core::SeedableRng;

    fn tiny() -> ModelConfig {
        ModelConfig::new(4, 0.125, 4, 1).unwrap()
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = FullModel::<f32>::init(ModelConfig::default(), 7).unwrap();
        let b = FullModel::<f32>::init(ModelConfig::default(), 7).unwrap();
        assert_eq!(a, b);
        let c = FullModel::<f32>::init(ModelConfig::default(), 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn default_measurement_shape() {
        let m = FullModel::<f32>::init(ModelConfig::default(), 0).unwrap();
        assert_eq!(m.measurement.weights().shape(), [64, 1, 16, 16]);
        let cfg = ModelConfig::new(8, 0.04, 4, 1).unwrap();
        let m = FullModel::<f32>::init(cfg, 0).unwrap();
        assert_eq!(m.measurement.measurements(), 3);
    }

    #[test]
    fn init_bounds_and_defaults() {
        let m = FullModel::<f64>::init(tiny(), 3).unwrap();
        let bound = (6.0f64 / 16.0).sqrt();
        assert!(m.measurement.weights().max_abs() <= bound);
        assert!(m.net.lift_slope.data().iter().all(|&s| s == 0.25));
        assert_eq!(m.net.head_bias.max_abs(), 0.0);
    }

    #[test]
    fn output_shape_law() {
        let cfg = ModelConfig::new(16, 0.25, 4, 1).unwrap();
        let m = FullModel::<f32>::init(cfg, 0).unwrap();
        let y = m.net.reconstruct(&Tensor::zeros([1, 64, 4, 4])).unwrap();
        assert_eq!(y.shape(), [1, 1, 64, 64]);
    }

    #[test]
    fn zero_head_gives_zero_image() {
        let mut m = FullModel::<f64>::init(tiny(), 1).unwrap();
        m.net.head_weight = Tensor::zeros(m.net.head_weight.shape());
        m.net.lift_weight = Tensor::zeros(m.net.lift_weight.shape());
        for b in &mut m.net.blocks {
            b.conv1_weight = Tensor::zeros(b.conv1_weight.shape());
            b.conv2_weight = Tensor::zeros(b.conv2_weight.shape());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let y = m.net.reconstruct(&random_tensor([2, 2, 3, 3], &mut rng)).unwrap();
        assert_eq!(y.max_abs(), 0.0);
    }

    #[test]
    fn zeroed_residual_block_is_identity() {
        let cfg = ModelConfig::new(4, 0.25, 3, 2).unwrap();
        let mut m = FullModel::<f64>::init(cfg, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let meas = random_tensor([1, 4, 2, 2], &mut rng);
        let mut without = m.net.clone();
        without.blocks.remove(1);
        let b = &mut m.net.blocks[1];
        b.conv1_weight = Tensor::zeros(b.conv1_weight.shape());
        b.conv2_weight = Tensor::zeros(b.conv2_weight.shape());
        assert_eq!(m.net.reconstruct(&meas).unwrap(), without.reconstruct(&meas).unwrap());
    }

    #[test]
    fn channel_mismatch_rejected() {
        let m = FullModel::<f32>::init(tiny(), 0).unwrap();
        assert!(m.net.reconstruct(&Tensor::zeros([1, 3, 2, 2])).is_err());
    }

    #[test]
    fn names_align_with_params() {
        let mut m = FullModel::<f32>::init(ModelConfig::new(4, 0.25, 2, 3).unwrap(), 0).unwrap();
        let shapes: Vec<_> = m.named_params().iter().map(|(_, t)| t.shape()).collect();
        let mut_shapes: Vec<_> = m.params_mut().iter().map(|t| t.shape()).collect();
        assert_eq!(shapes, mut_shapes);
        assert_eq!(shapes.len(), 1 + 4 + 5 * 3 + 2);
        let (_, grads) = m.loss_and_grads(&Tensor::zeros([1, 1, 8, 8])).unwrap();
        let grad_shapes: Vec<_> = grads.iter().map(Tensor::shape).collect();
        assert_eq!(grad_shapes, shapes);
    }
}
