//! Measurement operator, full-image reconstruction network and the
//! block-by-block baseline.

mod baseline;
mod measurement;
mod reconstruction;

use std::fmt;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;
use rand_core::SeedableRng;

pub use baseline::{BaselineBlockNet, BaselineModel};
pub use measurement::MeasurementOp;
pub use reconstruction::{init_model, FullModel, ReconstructionNet, ResidualBlock};

use crate::error::{Error, Result};
use crate::kernels::uniform_symmetric;
use crate::tensor::{Scalar, Tensor};

/// Architecture hyperparameters shared by both pipelines.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub block_size: usize,
    pub rate: f64,
    pub lift_channels: usize,
    pub residual_blocks: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            block_size: 16,
            rate: 0.25,
            lift_channels: 32,
            residual_blocks: 5,
        }
    }
}

impl ModelConfig {
    pub fn new(
        block_size: usize,
        rate: f64,
        lift_channels: usize,
        residual_blocks: usize,
    ) -> Result<Self> {
        let config = ModelConfig {
            block_size,
            rate,
            lift_channels,
            residual_blocks,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.block_size < 2 {
            return Err(Error::Config(format!(
                "block size must be at least 2, got {}",
                self.block_size
            )));
        }
        if !(self.rate > 0.0 && self.rate <= 1.0) {
            return Err(Error::Config(format!(
                "measurement rate must be in (0, 1], got {}",
                self.rate
            )));
        }
        if self.lift_channels == 0 {
            return Err(Error::Config("lift channels must be positive".into()));
        }
        if self.residual_blocks == 0 {
            return Err(Error::Config("residual block count must be positive".into()));
        }
        Ok(())
    }

    /// `M = max(1, round_half_up(rate * B^2))`.
    pub fn measurements(&self) -> usize {
        measurement_count(self.rate, self.block_size)
    }
}

pub fn measurement_count(rate: f64, block_size: usize) -> usize {
    let exact = rate * (block_size * block_size) as f64;
    ((exact + 0.5).floor() as usize).max(1)
}

/// Which reconstruction pipeline a model uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Method {
    Full,
    Baseline,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Full => "full",
            Method::Baseline => "baseline",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Method::Full),
            "baseline" => Ok(Method::Baseline),
            other => Err(Error::Config(format!(
                "method must be `full` or `baseline`, got `{other}`"
            ))),
        }
    }
}

/// A trainable measurement + reconstruction pipeline.
pub trait CsModel<T: Scalar> {
    fn config(&self) -> &ModelConfig;

    fn method(&self) -> Method;

    fn measurement(&self) -> &MeasurementOp<T>;

    /// Measures `images` block by block and reconstructs them.
    fn reconstruct(&self, images: &Tensor<T>) -> Result<Tensor<T>>;

    /// Full-image MSE loss against the input and its gradient for every
    /// parameter, in [`CsModel::named_params`] order.
    fn loss_and_grads(&self, images: &Tensor<T>) -> Result<(T, Vec<Tensor<T>>)>;

    fn named_params(&self) -> Vec<(String, &Tensor<T>)>;

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>>;
}

/// Either pipeline, for code that handles both uniformly.
#[derive(Debug, Clone)]
pub enum AnyModel<T: Scalar> {
    Full(FullModel<T>),
    Baseline(BaselineModel<T>),
}

impl<T: Scalar> AnyModel<T> {
    pub fn init(method: Method, config: ModelConfig, seed: u64) -> Result<Self> {
        Ok(match method {
            Method::Full => AnyModel::Full(FullModel::init(config, seed)?),
            Method::Baseline => AnyModel::Baseline(BaselineModel::init(config, seed)?),
        })
    }

    /// A model with every parameter zero, used as a loading template.
    pub fn zeros(method: Method, config: ModelConfig) -> Result<Self> {
        Ok(match method {
            Method::Full => AnyModel::Full(FullModel::zeros(config)?),
            Method::Baseline => AnyModel::Baseline(BaselineModel::zeros(config)?),
        })
    }

    fn inner(&self) -> &dyn CsModel<T> {
        match self {
            AnyModel::Full(m) => m,
            AnyModel::Baseline(m) => m,
        }
    }

    fn inner_mut(&mut self) -> &mut dyn CsModel<T> {
        match self {
            AnyModel::Full(m) => m,
            AnyModel::Baseline(m) => m,
        }
    }
}

impl<T: Scalar> CsModel<T> for AnyModel<T> {
    fn config(&self) -> &ModelConfig {
        self.inner().config()
    }

    fn method(&self) -> Method {
        self.inner().method()
    }

    fn measurement(&self) -> &MeasurementOp<T> {
        self.inner().measurement()
    }

    fn reconstruct(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        self.inner().reconstruct(images)
    }

    fn loss_and_grads(&self, images: &Tensor<T>) -> Result<(T, Vec<Tensor<T>>)> {
        self.inner().loss_and_grads(images)
    }

    fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        self.inner().named_params()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.inner_mut().params_mut()
    }
}

/// Seeded uniform initializer with bound `sqrt(2 / fan_in) * sqrt(3)`.
///
/// Each draw takes the top 53 bits of one ChaCha8 `u64`, maps them to
/// `[-1, 1)` and scales by the bound.
pub(crate) struct Initializer {
    rng: ChaCha8Rng,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Initializer {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn he_uniform<T: Scalar>(&mut self, shape: [usize; 4], fan_in: usize) -> Tensor<T> {
        let bound = (2.0 / fan_in as f64).sqrt() * 3f64.sqrt();
        Tensor::from_fn(shape, |_| T::from_f64(bound * uniform_symmetric(&mut self.rng)))
    }
}

/// Copies `source` into `target`, checking the shape against the template.
pub(crate) fn assign_param<T: Scalar>(
    name: &str,
    target: &mut Tensor<T>,
    source: &Tensor<T>,
) -> Result<()> {
    if target.shape() != source.shape() {
        return Err(Error::checkpoint(
            name,
            format!(
                "shape {:?} does not match configuration {:?}",
                source.shape(),
                target.shape()
            ),
        ));
    }
    target.data_mut().copy_from_slice(source.data());
    Ok(())
}
