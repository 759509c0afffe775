//! The 64-bit finite-difference gradient suite.
//!
//! Every backward pass is compared with central differences of a random
//! linear functional `sum(out * r)` of its forward pass; the two
//! end-to-end checks differentiate the training loss of a tiny model
//! (B=4, M=2, c=4, K=1 on an 8x8 input) with respect to every parameter.

use rand_chacha::ChaCha8Rng;
use rand_core::SeedableRng;

use crate::error::Result;
use crate::kernels::{
    conv2d_backward, conv2d_forward, convtranspose2d_backward, convtranspose2d_forward, finite_difference_grad,
    max_relative_error, mse_loss, prelu_backward, prelu_forward, random_tensor, ConvSpec,
};
use crate::model::{AnyModel, CsModel, Method, ModelConfig};
use crate::tensor::Tensor;

/// Names of the checked operations, in suite order.
pub const OPS: [&str; 7] = [
    "conv2d",
    "convtranspose2d",
    "prelu",
    "mse_loss",
    "measurement",
    "full_model",
    "baseline_model",
];

const STEP: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct OpCheck {
    pub op: &'static str,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Default)]
pub struct SuiteOptions {
    pub seed: u64,
    /// Negates the analytic gradient of this op, to prove the suite can fail.
    pub flip_sign: Option<String>,
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

struct Collector {
    analytic: Vec<f64>,
    numeric: Vec<f64>,
}

impl Collector {
    fn new() -> Self {
        Collector {
            analytic: Vec::new(),
            numeric: Vec::new(),
        }
    }

    fn push(&mut self, analytic: &Tensor<f64>, numeric: &Tensor<f64>) {
        self.analytic.extend_from_slice(analytic.data());
        self.numeric.extend_from_slice(numeric.data());
    }

    fn error(&self, flip: bool) -> f64 {
        if flip {
            let negated: Vec<f64> = self.analytic.iter().map(|v| -v).collect();
            max_relative_error(&negated, &self.numeric)
        } else {
            max_relative_error(&self.analytic, &self.numeric)
        }
    }
}

fn check_conv(rng: &mut ChaCha8Rng) -> Result<Collector> {
    let spec = ConvSpec::square(2, 3, 3, 2, 1, true)?;
    let x = random_tensor::<f64>([2, 2, 7, 6], rng);
    let w = random_tensor::<f64>([3, 2, 3, 3], rng);
    let b = random_tensor::<f64>([1, 3, 1, 1], rng);
    let out = conv2d_forward(&x, &w, Some(&b), &spec)?;
    let r = random_tensor::<f64>(out.shape(), rng);
    let grads = conv2d_backward(&x, &w, &spec, &r)?;
    let mut c = Collector::new();
    let f = |x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>| dot(&conv2d_forward(x, w, Some(b), &spec).unwrap(), &r);
    c.push(&grads.input, &finite_difference_grad(|t| f(t, &w, &b), &x, STEP));
    c.push(&grads.weights, &finite_difference_grad(|t| f(&x, t, &b), &w, STEP));
    let gb = grads.bias.expect("bias gradient");
    c.push(&gb, &finite_difference_grad(|t| f(&x, &w, t), &b, STEP));
    Ok(c)
}

fn check_convtranspose(rng: &mut ChaCha8Rng) -> Result<Collector> {
    let spec = ConvSpec::square(3, 2, 2, 2, 0, true)?;
    let x = random_tensor::<f64>([2, 3, 3, 4], rng);
    let w = random_tensor::<f64>([3, 2, 2, 2], rng);
    let b = random_tensor::<f64>([1, 2, 1, 1], rng);
    let out = convtranspose2d_forward(&x, &w, Some(&b), &spec)?;
    let r = random_tensor::<f64>(out.shape(), rng);
    let grads = convtranspose2d_backward(&x, &w, &spec, &r)?;
    let f = |x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>| {
        dot(&convtranspose2d_forward(x, w, Some(b), &spec).unwrap(), &r)
    };
    let mut c = Collector::new();
    c.push(&grads.input, &finite_difference_grad(|t| f(t, &w, &b), &x, STEP));
    c.push(&grads.weights, &finite_difference_grad(|t| f(&x, t, &b), &w, STEP));
    let gb = grads.bias.expect("bias gradient");
    c.push(&gb, &finite_difference_grad(|t| f(&x, &w, t), &b, STEP));
    Ok(c)
}

fn check_prelu(rng: &mut ChaCha8Rng) -> Result<Collector> {
    let x = random_tensor::<f64>([2, 3, 4, 4], rng);
    let slope = Tensor::<f64>::from_vec([1, 3, 1, 1], vec![0.25, -0.5, 1.5])?;
    let r = random_tensor::<f64>(x.shape(), rng);
    let (gx, gs) = prelu_backward(&x, slope.data(), &r)?;
    let gs = Tensor::from_vec(slope.shape(), gs)?;
    let f = |x: &Tensor<f64>, s: &Tensor<f64>| dot(&prelu_forward(x, s.data()).unwrap(), &r);
    let mut c = Collector::new();
    c.push(&gx, &finite_difference_grad(|t| f(t, &slope), &x, STEP));
    c.push(&gs, &finite_difference_grad(|t| f(&x, t), &slope, STEP));
    Ok(c)
}

fn check_mse(rng: &mut ChaCha8Rng) -> Result<Collector> {
    let pred = random_tensor::<f64>([3, 1, 4, 5], rng);
    let target = random_tensor::<f64>(pred.shape(), rng);
    let (_, grad) = mse_loss(&pred, &target)?;
    let numeric = finite_difference_grad(|t| mse_loss(t, &target).unwrap().0, &pred, STEP);
    let mut c = Collector::new();
    c.push(&grad, &numeric);
    Ok(c)
}

fn check_measurement(rng: &mut ChaCha8Rng) -> Result<Collector> {
    let config = tiny_config();
    let model = AnyModel::<f64>::init(Method::Full, config, 11)?;
    let op = model.measurement().clone();
    let x = random_tensor::<f64>([2, 1, 8, 8], rng);
    let out = op.measure(&x)?;
    let r = random_tensor::<f64>(out.shape(), rng);
    let grad = op.backward(&x, &r)?;
    let numeric = finite_difference_grad(
        |w| {
            let mut probe = op.clone();
            probe.weights_mut().data_mut().copy_from_slice(w.data());
            dot(&probe.measure(&x).unwrap(), &r)
        },
        op.weights(),
        STEP,
    );
    let mut c = Collector::new();
    c.push(&grad, &numeric);
    Ok(c)
}

fn tiny_config() -> ModelConfig {
    ModelConfig {
        block_size: 4,
        rate: 0.125,
        lift_channels: 4,
        residual_blocks: 1,
    }
}

fn check_model(method: Method, rng: &mut ChaCha8Rng) -> Result<Collector> {
    let model = AnyModel::<f64>::init(method, tiny_config(), 5)?;
    let images = random_tensor::<f64>([2, 1, 8, 8], rng);
    let (_, grads) = model.loss_and_grads(&images)?;
    let params: Vec<Tensor<f64>> = model.named_params().into_iter().map(|(_, t)| t.clone()).collect();
    let mut c = Collector::new();
    for (i, (param, grad)) in params.iter().zip(&grads).enumerate() {
        let numeric = finite_difference_grad(
            |t| {
                let mut probe = model.clone();
                probe.params_mut()[i].data_mut().copy_from_slice(t.data());
                probe.loss_and_grads(&images).unwrap().0
            },
            param,
            STEP,
        );
        c.push(grad, &numeric);
    }
    Ok(c)
}

/// Runs every check; an op passes when its error is strictly below `tolerance`.
pub fn run_gradient_suite(options: &SuiteOptions, tolerance: f64) -> Result<Vec<OpCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut results = Vec::with_capacity(OPS.len());
    for op in OPS {
        let collected = match op {
            "conv2d" => check_conv(&mut rng)?,
            "convtranspose2d" => check_convtranspose(&mut rng)?,
            "prelu" => check_prelu(&mut rng)?,
            "mse_loss" => check_mse(&mut rng)?,
            "measurement" => check_measurement(&mut rng)?,
            "full_model" => check_model(Method::Full, &mut rng)?,
            _ => check_model(Method::Baseline, &mut rng)?,
        };
        let max_rel_error = collected.error(options.flip_sign.as_deref() == Some(op));
        results.push(OpCheck {
            op,
            max_rel_error,
            passed: max_rel_error < tolerance,
        });
    }
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiny_config_has_two_measurements() {
        assert_eq!(tiny_config().measurements(), 2);
    }

    #[test]
    fn suite_passes_and_flip_is_caught() {
        let results = run_gradient_suite(&SuiteOptions::default(), 1e-5).unwrap();
        assert!(results.iter().all(|r| r.passed));
        let flipped = SuiteOptions {
            flip_sign: Some("prelu".into()),
            ..SuiteOptions::default()
        };
        let results = run_gradient_suite(&flipped, 1e-5).unwrap();
        let failed: Vec<_> = results.iter().filter(|r| !r.passed).map(|r| r.op).collect();
        assert_eq!(failed, vec!["prelu"]);
    }
}
